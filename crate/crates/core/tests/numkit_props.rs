use proptest::collection::vec;
use proptest::prelude::*;
use rcr_core::numkit::{check_gradients, Adam, GruCell, Linear, ParamSet, Tape, Tensor, Var};
use rcr_core::rng;

struct Net {
    params: ParamSet,
    cell: GruCell,
    head: Linear,
}

fn net(seed: u64) -> Net {
    let mut r = rng::stream(seed, 0);
    let mut params = ParamSet::new();
    let cell = GruCell::new(&mut params, "cell", 3, 4, &mut r).unwrap();
    let head = Linear::new(&mut params, "head", 4, 2, &mut r).unwrap();
    Net { params, cell, head }
}

/// Two GRU steps, a dense head and a squared readout.
fn graph(n: &Net, tape: &mut Tape, xs: &[f64], h0: &[f64]) -> rcr_core::Result<Var> {
    let mut h = tape.constant(Tensor::matrix(1, 4, h0.to_vec())?)?;
    for x in xs.chunks(3) {
        let x = tape.constant(Tensor::matrix(1, 3, x.to_vec())?)?;
        h = n.cell.forward(tape, x, h)?;
    }
    let y = n.head.forward(tape, h)?;
    let sq = tape.mul(y, y)?;
    tape.sum(sq)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recurrent_net_passes_gradient_check(seed in any::<u64>(), xs in vec(-1.0f64..1.0, 6), h0 in vec(-0.5f64..0.5, 4)) {
        let n = net(seed);
        let err = check_gradients(&n.params, 1e-5, |t| graph(&n, t, &xs, &h0)).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn outputs_and_gradients_are_bit_identical_across_runs(seed in any::<u64>(), xs in vec(-1.0f64..1.0, 6), h0 in vec(-0.5f64..0.5, 4)) {
        let run = || {
            let n = net(seed);
            let mut tape = Tape::new(&n.params);
            let loss = graph(&n, &mut tape, &xs, &h0).unwrap();
            let value = tape.scalar(loss).to_bits();
            let grads = tape.backward(loss).unwrap();
            let bits: Vec<u64> = grads.iter().flat_map(|(_, g)| g.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
            (value, bits)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_of_adam(seed in any::<u64>(), lr in 1e-6f64..1.0, steps in 1usize..6) {
        let mut n = net(seed);
        let before = n.params.clone();
        for _ in 0..steps {
            Adam::with_clip(5.0).step(&mut n.params, lr).unwrap();
        }
        let values = |p: &ParamSet| p.entries().map(|(k, t)| (k.to_string(), t.clone())).collect::<Vec<_>>();
        prop_assert_eq!(values(&n.params), values(&before));
    }
}
