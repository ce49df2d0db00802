use super::{ParamSet, Tape, Var};
use crate::Result;

const COORDS_PER_TENSOR: usize = 12;

/// Compares tape gradients of the scalar built by `graph` against central
/// finite differences on a strided sample of coordinates of every parameter.
///
/// Returns `max |analytic - numeric| / (|numeric| + 1e-8)`.
pub fn check_gradients<F>(params: &ParamSet, epsilon: f64, graph: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(crate::Error::InvalidArgument(alloc::format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = graph(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new(ps);
        let loss = graph(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        let n = params.value(id).len();
        let stride = (n / COORDS_PER_TENSOR).max(1);
        let grad = analytic.get(id);
        for j in (0..n).step_by(stride).take(COORDS_PER_TENSOR) {
            let original = params.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = original + epsilon;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = original - epsilon;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (grad.data()[j] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Linear, Tensor};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_model_agrees_with_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "lin", 4, 3, &mut rng).unwrap();
        let err = check_gradients(&ps, 1e-5, |t| {
            let x = t.constant(Tensor::vector(vec![0.3, -1.2, 0.8, 2.0]))?;
            let y = lin.forward(t, x)?;
            let w = t.constant(Tensor::vector(vec![1.0, -2.0, 0.5]))?;
            let y = t.mul(y, w)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut ps = ParamSet::new();
        ps.add("unused", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let err = check_gradients(&ps, 1e-5, |t| t.constant(Tensor::scalar(3.0))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_layer_net_agrees_with_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let l1 = Linear::new(&mut ps, "l1", 5, 7, &mut rng).unwrap();
        let l2 = Linear::new(&mut ps, "l2", 7, 3, &mut rng).unwrap();
        let input: alloc::vec::Vec<f64> = (0..10).map(|i| libm::sin(i as f64)).collect();
        let err = check_gradients(&ps, 1e-5, |t| {
            let x = t.constant(Tensor::matrix(2, 5, input.clone())?)?;
            let h = l1.forward(t, x)?;
            let h = t.tanh(h)?;
            let y = l2.forward(t, h)?;
            let ls = t.log_softmax(y)?;
            let p = t.pick(ls, &[2, 0])?;
            t.sum(p)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let ps = ParamSet::new();
        assert!(check_gradients(&ps, 0.5, |t| t.constant(Tensor::scalar(0.0))).is_err());
    }
}
