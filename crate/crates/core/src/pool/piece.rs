use crate::error::{Error, Result};
use crate::model::{Adapter, AdapterSlot, LoraPair, SlotHook, TrainTarget};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};

/// Norms below this give a zero unit gate.
pub const GATE_EPS: f64 = 1e-8;

/// One sharer's low-rank pair at one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Piece<T = f32> {
    pub sharer: u32,
    pub slot: usize,
    pub pair: LoraPair<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateVector<T = f32> {
    pub sharer: u32,
    pub slot: usize,
    g: Vec<T>,
    unit: Vec<T>,
}

impl<T: Scalar> GateVector<T> {
    pub fn new(sharer: u32, slot: usize, g: Vec<T>) -> Self {
        let unit = unit_or_zero(&g);
        Self { sharer, slot, g, unit }
    }

    pub fn zeros(sharer: u32, slot: usize, n: usize) -> Self {
        Self::new(sharer, slot, vec![T::zero(); n])
    }

    pub fn raw(&self) -> &[T] {
        &self.g
    }

    /// ḡ, or all zeros when ‖g‖ < [`GATE_EPS`].
    pub fn unit(&self) -> &[T] {
        &self.unit
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }
}

/// `x/‖x‖`, or zeros when the norm is below [`GATE_EPS`].
pub fn unit_or_zero<T: Scalar>(x: &[T]) -> Vec<T> {
    let norm = kernels::dot(x, x).to_f64().sqrt();
    if norm < GATE_EPS {
        return vec![T::zero(); x.len()];
    }
    let inv = T::from_f64(1.0 / norm);
    x.iter().map(|&v| v * inv).collect()
}

/// Splits an adapter into one piece per slot.
pub fn decompose<T: Scalar>(adapter: &Adapter<T>, sharer: u32, slots: &[AdapterSlot]) -> Result<Vec<Piece<T>>> {
    if adapter.pairs.len() != slots.len() {
        return Err(Error::invalid(format!(
            "adapter covers {} slots, model has {}",
            adapter.pairs.len(),
            slots.len()
        )));
    }
    adapter.check(slots)?;
    Ok(adapter
        .pairs
        .iter()
        .enumerate()
        .map(|(slot, pair)| Piece {
            sharer,
            slot,
            pair: pair.clone(),
        })
        .collect())
}

/// Inverse of [`decompose`].
pub fn reassemble<T: Scalar>(pieces: &[Piece<T>]) -> Result<Adapter<T>> {
    let Some(first) = pieces.first() else {
        return Err(Error::invalid("no pieces"));
    };
    let rank = first.pair.a.rows();
    for (i, p) in pieces.iter().enumerate() {
        if p.slot != i || p.sharer != first.sharer {
            return Err(Error::invalid("pieces must be slot-ordered and from one sharer"));
        }
    }
    Ok(Adapter {
        rank,
        pairs: pieces.iter().map(|p| p.pair.clone()).collect(),
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `B·A·v·σ(gᵀv)` for one token activation.
pub fn gated_forward_delta<T: Scalar>(piece: &Piece<T>, gate: &GateVector<T>, v: &[T]) -> Result<Vec<T>> {
    let (a, b) = (&piece.pair.a, &piece.pair.b);
    let (r, n) = (a.rows(), a.cols());
    if v.len() != n || gate.dim() != n {
        return Err(Error::DimMismatch {
            slot: piece.slot,
            expected: vec![n],
            got: vec![v.len(), gate.dim()],
        });
    }
    let s = T::from_f64(sigmoid(kernels::dot(gate.raw(), v).to_f64()));
    let low: Vec<T> = (0..r).map(|i| kernels::dot(a.row(i), v)).collect();
    Ok((0..b.rows()).map(|i| kernels::dot(b.row(i), &low) * s).collect())
}

/// A sharer's frozen pieces plus trainable gates, one per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedPieces<T> {
    pub sharer: u32,
    pub pieces: Vec<Piece<T>>,
    /// `[1, n_l]` each.
    pub gates: Vec<Tensor<T>>,
}

impl<T: Scalar> GatedPieces<T> {
    /// Zero-initialized gates.
    pub fn new(pieces: Vec<Piece<T>>) -> Result<Self> {
        let sharer = pieces.first().map(|p| p.sharer).ok_or_else(|| Error::invalid("no pieces"))?;
        let gates = pieces.iter().map(|p| Tensor::zeros(&[1, p.pair.a.cols()])).collect();
        Ok(Self { sharer, pieces, gates })
    }

    pub fn gate_vectors(&self) -> Vec<GateVector<T>> {
        self.gates
            .iter()
            .enumerate()
            .map(|(slot, g)| GateVector::new(self.sharer, slot, g.data().to_vec()))
            .collect()
    }

    /// Binds pieces as constants and gates as trainable (or constant) leaves.
    pub fn bind_hook(&self, g: &mut Graph<T>, trainable: bool) -> Result<GatedHook> {
        let mut slots = Vec::with_capacity(self.pieces.len());
        for (p, gate) in self.pieces.iter().zip(&self.gates) {
            let a = g.constant(p.pair.a.clone())?;
            let b = g.constant(p.pair.b.clone())?;
            let gv = if trainable {
                g.param(gate.clone())?
            } else {
                g.constant(gate.clone())?
            };
            slots.push((a, b, gv));
        }
        Ok(GatedHook { slots })
    }
}

/// `z = W v + B A v σ(gᵀv)` at every slot.
#[derive(Debug, Clone)]
pub struct GatedHook {
    slots: Vec<(Var, Var, Var)>,
}

impl GatedHook {
    pub fn gate_vars(&self) -> Vec<Var> {
        self.slots.iter().map(|s| s.2).collect()
    }
}

impl<T: Scalar> SlotHook<T> for GatedHook {
    fn apply(&mut self, g: &mut Graph<T>, slot: &AdapterSlot, input: Var, base_out: Var) -> Result<Var> {
        let Some(&(a, b, gate)) = self.slots.get(slot.index) else {
            return Ok(base_out);
        };
        let logit = g.matmul_t(input, gate)?;
        let s = g.sigmoid(logit)?;
        let low = g.matmul_t(input, a)?;
        let delta = g.matmul_t(low, b)?;
        let delta = g.mul_col(delta, s)?;
        Ok(g.add(base_out, delta)?)
    }
}

impl<T: Scalar> TrainTarget<T> for GatedPieces<T> {
    type Hook = GatedHook;

    fn bind(&self, g: &mut Graph<T>) -> Result<(GatedHook, Vec<Var>)> {
        let hook = self.bind_hook(g, true)?;
        let vars = hook.gate_vars();
        Ok((hook, vars))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.gates.iter_mut().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn piece(a: Tensor<f64>, b: Tensor<f64>) -> Piece<f64> {
        Piece {
            sharer: 1,
            slot: 0,
            pair: LoraPair { a, b },
        }
    }

    #[test]
    fn zero_gate_halves_the_update() {
        let p = piece(
            Tensor::from_rows(&[&[1.0, 2.0, 0.0]]),
            Tensor::from_rows(&[&[1.0], &[-3.0]]),
        );
        let g = GateVector::zeros(1, 0, 3);
        let d = gated_forward_delta(&p, &g, &[1.0, 1.0, 1.0]).unwrap();
        // B·A·v = [3, -9]
        assert_eq!(d, vec![1.5, -4.5]);
    }

    #[test]
    fn strongly_negative_gate_suppresses() {
        let p = piece(Tensor::from_rows(&[&[1.0, 1.0]]), Tensor::from_rows(&[&[2.0]]));
        let g = GateVector::new(1, 0, vec![-400.0, -400.0]);
        let d = gated_forward_delta(&p, &g, &[1.0, 1.0]).unwrap();
        assert!(d[0].abs() < 1e-300);
        assert!(gated_forward_delta(&p, &g, &[1.0]).is_err());
    }

    #[test]
    fn unit_gate_guard() {
        let g = GateVector::new(0, 0, vec![3.0f64, 4.0]);
        assert!((g.unit()[0] - 0.6).abs() < 1e-12 && (g.unit()[1] - 0.8).abs() < 1e-12);
        let tiny = GateVector::new(0, 0, vec![1e-9f64, 0.0]);
        assert_eq!(tiny.unit(), &[0.0, 0.0]);
    }

    #[test]
    fn decompose_partitions_adapter() {
        let slots = ModelConfig::default().slots();
        let adapter = Adapter::<f32>::init(&slots, 4, 2);
        let pieces = decompose(&adapter, 7, &slots).unwrap();
        assert_eq!(pieces.len(), 16);
        assert!(pieces.iter().enumerate().all(|(i, p)| p.slot == i && p.sharer == 7));
        assert_eq!(reassemble(&pieces).unwrap(), adapter);
        let zero = decompose(&Adapter::<f32>::zeros(&slots, 4), 1, &slots).unwrap();
        assert!(zero.iter().all(|p| p.pair.b.data().iter().all(|&x| x == 0.0)));
        let short = Adapter {
            rank: 4,
            pairs: adapter.pairs[..15].to_vec(),
        };
        assert!(decompose(&short, 7, &slots).is_err());
    }
}
