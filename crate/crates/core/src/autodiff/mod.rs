//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Only the primitives needed by the codec, the separator and the losses are
//! provided. Forward values are computed eagerly in `f64`; any non-finite
//! result is reported as [`Error::Numeric`](crate::Error::Numeric) instead of
//! propagating.

pub mod gradcheck;
mod kernels;
mod param;
mod tape;

pub use kernels::{conv1d, conv_transpose1d, depthwise_conv1d, ConvSpec};
pub use param::{Adam, ParamId, ParamStore, Parameter, RunningStats, StatsId};
pub use tape::{Gradients, NormStats, Tape, Var, NORM_EPS};

#[cfg(test)]
mod tests {
    use super::gradcheck::check_inputs;
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-4;
    const TOL: f64 = 1e-4;
    const INSTANCES: u64 = 20;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Values bounded away from zero so kinks and poles stay out of reach of
    /// the finite-difference stencil.
    fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = rng.random_range(0.2..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn assert_grads<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> crate::Result<Var> + Copy,
    {
        for seed in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            for r in check_inputs(&inputs, STEP, f).unwrap() {
                assert!(
                    r.max_rel_err < TOL,
                    "{name} seed {seed} {}: rel err {}",
                    r.name,
                    r.max_rel_err
                );
            }
        }
    }

    /// Reduces an arbitrary output to a scalar through fixed random weights so
    /// every output element contributes distinctly.
    fn weighted_sum(tape: &mut Tape, y: Var) -> crate::Result<Var> {
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect())?;
        let w = tape.constant(w)?;
        tape.dot(y, w)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn independent_input_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]), true).unwrap();
        let y = tape.leaf(Tensor::ones(&[3]), true).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none());
        let _ = x;
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]), true).unwrap();
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn division_by_zero_reports_location() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3])).unwrap();
        let b = tape.constant(Tensor::new(&[3], vec![1.0, 0.0, 2.0]).unwrap()).unwrap();
        match tape.div(a, b) {
            Err(Error::Numeric { op, detail }) => {
                assert_eq!(op, "div");
                assert!(detail.contains("index 1"), "{detail}");
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(tape.scale(a, 1e300), Err(Error::Numeric { .. })));
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![-2.0, 3.0]).unwrap()).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 3.0]);
        let x = tape.constant(Tensor::new(&[1, 1], vec![-4.0]).unwrap()).unwrap();
        let a = tape.constant(Tensor::scalar(0.25)).unwrap();
        let p = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(p).item(), -1.0);
        let im = tape.constant(Tensor::scalar(4.0)).unwrap();
        let re = tape.constant(Tensor::scalar(3.0)).unwrap();
        let ang = tape.atan2(im, re).unwrap();
        assert!((tape.value(ang).item() - 0.927_295_218_001_612_2).abs() < 1e-15);
        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        let ang0 = tape.atan2(zero, zero).unwrap();
        assert_eq!(tape.value(ang0).item(), 0.0);
    }

    /// Machin-style series for atan(4/3) = π/2 − atan(3/4), independent of libm.
    #[test]
    fn atan2_matches_series() {
        let x: f64 = 0.75;
        let series: f64 = (0..200)
            .map(|n| {
                let k = 2 * n + 1;
                let term = x.powi(k as i32) / k as f64;
                if n % 2 == 0 {
                    term
                } else {
                    -term
                }
            })
            .sum();
        let want = std::f64::consts::FRAC_PI_2 - series;
        assert!((want - 0.92729522).abs() < 1e-8);
        let mut tape = Tape::new();
        let im = tape.constant(Tensor::scalar(4.0)).unwrap();
        let re = tape.constant(Tensor::scalar(3.0)).unwrap();
        let ang = tape.atan2(im, re).unwrap();
        assert!((tape.value(ang).item() - want).abs() < 1e-12);
    }

    #[test]
    fn every_op_visited_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.3, 0.1, -0.7]).unwrap(), true).unwrap();
        let a = tape.square(x).unwrap();
        let b = tape.sin(x).unwrap();
        let c = tape.add(a, b).unwrap();
        let d = tape.mul(c, x).unwrap();
        let e = tape.mean(d).unwrap();
        let f = tape.sum(a).unwrap();
        let loss = tape.add(e, f).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.visited_ops(), tape.differentiable_ops());
        assert_eq!(grads.visited_ops(), 7);
    }

    #[test]
    fn conv_primitives_gradients() {
        assert_grads(
            "conv1d",
            |rng| vec![random(rng, &[3, 19], -1.0, 1.0), random(rng, &[4, 3, 3], -1.0, 1.0)],
            |t, v| {
                let y = t.conv1d(
                    v[0],
                    v[1],
                    ConvSpec {
                        stride: 2,
                        dilation: 2,
                        pad_left: 3,
                        pad_right: 1,
                    },
                )?;
                weighted_sum(t, y)
            },
        );
        assert_grads(
            "conv_transpose1d",
            |rng| vec![random(rng, &[3, 7], -1.0, 1.0), random(rng, &[3, 2, 5], -1.0, 1.0)],
            |t, v| {
                let y = t.conv_transpose1d(v[0], v[1], 3)?;
                weighted_sum(t, y)
            },
        );
        assert_grads(
            "depthwise_conv1d",
            |rng| vec![random(rng, &[4, 15], -1.0, 1.0), random(rng, &[4, 3], -1.0, 1.0)],
            |t, v| {
                let y = t.depthwise_conv1d(v[0], v[1], ConvSpec::dilated(2, 4, 0))?;
                weighted_sum(t, y)
            },
        );
    }

    #[test]
    fn binary_and_broadcast_gradients() {
        let pair = |rng: &mut ChaCha8Rng| vec![away_from_zero(rng, &[3, 5]), away_from_zero(rng, &[3, 5])];
        assert_grads("add", pair, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y)
        });
        assert_grads("sub", pair, |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y)
        });
        assert_grads("mul", pair, |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y)
        });
        assert_grads("div", pair, |t, v| {
            let y = t.div(v[0], v[1])?;
            weighted_sum(t, y)
        });
        let chan = |rng: &mut ChaCha8Rng| vec![random(rng, &[3, 5], -1.0, 1.0), random(rng, &[3], -1.0, 1.0)];
        assert_grads("add_channels", chan, |t, v| {
            let y = t.add_channels(v[0], v[1])?;
            weighted_sum(t, y)
        });
        assert_grads("mul_channels", chan, |t, v| {
            let y = t.mul_channels(v[0], v[1])?;
            weighted_sum(t, y)
        });
        assert_grads(
            "mul_suffix",
            |rng| vec![random(rng, &[4, 1, 6], -1.0, 1.0), random(rng, &[6], -1.0, 1.0)],
            |t, v| {
                let y = t.mul_suffix(v[0], v[1])?;
                weighted_sum(t, y)
            },
        );
        assert_grads(
            "expand",
            |rng| vec![random(rng, &[1], -1.0, 1.0), random(rng, &[2, 4], -1.0, 1.0)],
            |t, v| {
                let s = t.expand(v[0], &[2, 4])?;
                let y = t.mul(s, v[1])?;
                weighted_sum(t, y)
            },
        );
    }

    #[test]
    fn unary_gradients() {
        let one = |rng: &mut ChaCha8Rng| vec![away_from_zero(rng, &[2, 6])];
        let positive = |rng: &mut ChaCha8Rng| vec![random(rng, &[2, 6], 0.2, 3.0)];
        macro_rules! unary {
            ($name:literal, $make:expr, $method:ident) => {
                assert_grads($name, $make, |t, v| {
                    let y = t.$method(v[0])?;
                    weighted_sum(t, y)
                });
            };
        }
        unary!("relu", one, relu);
        unary!("sigmoid", one, sigmoid);
        unary!("sqrt", positive, sqrt);
        unary!("cos", one, cos);
        unary!("sin", one, sin);
        unary!("ln", positive, ln);
        unary!("square", one, square);
        unary!("sum", one, sum);
        unary!("mean", one, mean);
        assert_grads("scale", one, |t, v| {
            let y = t.scale(v[0], -2.5)?;
            weighted_sum(t, y)
        });
        assert_grads("add_scalar", one, |t, v| {
            let y = t.add_scalar(v[0], 0.3)?;
            weighted_sum(t, y)
        });
        assert_grads("clamp", one, |t, v| {
            let y = t.clamp(v[0], -0.1, 0.1)?;
            let z = t.clamp(v[0], -10.0, 10.0)?;
            let s = t.add(y, z)?;
            weighted_sum(t, s)
        });
        assert_grads(
            "prelu",
            |rng| vec![away_from_zero(rng, &[3, 6]), random(rng, &[3], 0.0, 0.5)],
            |t, v| {
                let y = t.prelu(v[0], v[1])?;
                weighted_sum(t, y)
            },
        );
        let complex = |rng: &mut ChaCha8Rng| vec![away_from_zero(rng, &[2, 5]), away_from_zero(rng, &[2, 5])];
        assert_grads("atan2", complex, |t, v| {
            let y = t.atan2(v[0], v[1])?;
            weighted_sum(t, y)
        });
        assert_grads("hypot", complex, |t, v| {
            let y = t.hypot(v[0], v[1])?;
            weighted_sum(t, y)
        });
    }

    #[test]
    fn shape_op_gradients() {
        assert_grads(
            "concat/slice",
            |rng| vec![random(rng, &[2, 5], -1.0, 1.0), random(rng, &[3, 5], -1.0, 1.0)],
            |t, v| {
                let c = t.concat_rows(&[v[0], v[1]])?;
                let s = t.slice_rows(c, 1, 3)?;
                weighted_sum(t, s)
            },
        );
        assert_grads(
            "pad/crop/reshape",
            |rng| vec![random(rng, &[2, 6], -1.0, 1.0)],
            |t, v| {
                let p = t.pad_time(v[0], 2, 3)?;
                let c = t.crop_time(p, 1, 8)?;
                let r = t.reshape(c, &[4, 4])?;
                weighted_sum(t, r)
            },
        );
    }

    #[test]
    fn normalize_gradients() {
        for stats in [NormStats::Global, NormStats::PerFrame, NormStats::PerChannel] {
            let label = format!("{stats:?}");
            let f = move |t: &mut Tape, v: &[Var]| {
                let y = t.normalize(v[0], stats.clone(), v[1], v[2])?;
                weighted_sum(t, y)
            };
            for seed in 0..INSTANCES {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs = vec![
                    random(&mut rng, &[4, 7], -2.0, 2.0),
                    random(&mut rng, &[4], 0.5, 1.5),
                    random(&mut rng, &[4], -1.0, 1.0),
                ];
                for r in check_inputs(&inputs, STEP, f.clone()).unwrap() {
                    assert!(r.max_rel_err < TOL, "{label} {}: {}", r.name, r.max_rel_err);
                }
            }
        }
        let fixed = NormStats::Fixed {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 2.0, 1.0],
        };
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.normalize(v[0], fixed.clone(), v[1], v[2])?;
            weighted_sum(t, y)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            random(&mut rng, &[3, 5], -2.0, 2.0),
            random(&mut rng, &[3], 0.5, 1.5),
            random(&mut rng, &[3], -1.0, 1.0),
        ];
        for r in check_inputs(&inputs, STEP, f).unwrap() {
            assert!(r.max_rel_err < TOL);
        }
    }

    fn norm_output(x: Tensor, stats: NormStats, c: usize) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(x).unwrap();
        let one = tape.constant(Tensor::ones(&[c])).unwrap();
        let zero = tape.constant(Tensor::zeros(&[c])).unwrap();
        let y = tape.normalize(x, stats, one, zero).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn constant_input_normalizes_to_shift() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 4], 2.5)).unwrap();
        let scale = tape.constant(Tensor::new(&[3], vec![2.0, 3.0, 4.0]).unwrap()).unwrap();
        let shift = tape.constant(Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        for stats in [NormStats::Global, NormStats::PerFrame, NormStats::PerChannel] {
            let y = tape.normalize(x, stats, scale, shift).unwrap();
            for c in 0..3 {
                for &v in tape.value(y).row_slice(c) {
                    assert!((v - [0.1, 0.2, 0.3][c]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn global_norm_has_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = norm_output(random(&mut rng, &[4, 16], -3.0, 5.0), NormStats::Global, 4);
        let n = y.numel() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        // Variance is 1 up to the ε regularizer.
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }

    /// Two-pass mean/variance computed independently per statistics group.
    #[test]
    fn norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, &[4, 16], -1.0, 3.0);
        let (c, t) = (4, 16);
        let two_pass = |vals: &[f64]| {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        };
        let g = norm_output(x.clone(), NormStats::Global, c);
        let (m, v) = two_pass(x.data());
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - (b - m) / (v + NORM_EPS).sqrt()).abs() < 1e-12);
        }
        let cl = norm_output(x.clone(), NormStats::PerFrame, c);
        for tt in 0..t {
            let col: Vec<f64> = (0..c).map(|cc| x.data()[cc * t + tt]).collect();
            let (m, v) = two_pass(&col);
            for cc in 0..c {
                let want = (col[cc] - m) / (v + NORM_EPS).sqrt();
                assert!((cl.data()[cc * t + tt] - want).abs() < 1e-12);
            }
        }
        let bn = norm_output(x.clone(), NormStats::PerChannel, c);
        for cc in 0..c {
            let (m, v) = two_pass(x.row_slice(cc));
            for tt in 0..t {
                let want = (x.row_slice(cc)[tt] - m) / (v + NORM_EPS).sqrt();
                assert!((bn.row_slice(cc)[tt] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut tape = Tape::new();
            let x = tape.leaf(random(&mut rng, &[3, 40], -1.0, 1.0), true).unwrap();
            let k = tape.leaf(random(&mut rng, &[5, 3, 4], -1.0, 1.0), true).unwrap();
            let y = tape.conv1d(x, k, ConvSpec::stride(2)).unwrap();
            let z = tape.sigmoid(y).unwrap();
            let loss = tape.mean(z).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.value(z).clone(), g.wrt(k).unwrap().to_vec())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.data(), b.data());
        assert_eq!(ga, gb);
    }
}
