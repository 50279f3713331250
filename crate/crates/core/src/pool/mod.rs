//! Pieces, gates, the shared pool and assembled recipes.

mod piece;
mod recipe;
mod store;

pub use piece::{decompose, gated_forward_delta, reassemble, unit_or_zero, GateVector, GatedHook, GatedPieces, Piece, GATE_EPS};
pub use recipe::{compact_header_bytes, materialize, Recipe, RecipeEntry, RecipeSlot, WeightedPieceHook};
pub(crate) use recipe::slot_delta;
pub use store::{PiecePool, PoolPiece, PoolSharer, ShareMask, SharerContribution, POOL_VERSION};
