//! Central-difference gradient verification.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward implementation it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::param::ParamStore;
use super::tape::{Tape, Var};
use super::{causal_mask, KernelError, Tensor};

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Smallest step tried when a probe pair straddles a ReLU kink.
pub const MIN_STEP: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub params: Vec<ParamGradError>,
    pub evaluations: usize,
    /// Elements whose probes first straddled a ReLU kink and were re-probed
    /// with a smaller step.
    pub kink_retries: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences with step `h`, for every element of every parameter.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, h: f64, f: F) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, KernelError>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;

    let eval = |s: &ParamStore<f64>| -> Result<(f64, Vec<bool>), KernelError> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok((t.value(l).item(), t.kink_pattern()))
    };

    let mut evaluations = 0;
    let mut kink_retries = 0;
    let mut params = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.grad(id).clone();
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            let mut step = h;
            let numeric = loop {
                store.get_mut(id).value.data_mut()[i] = orig + step;
                let (plus, kp) = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig - step;
                let (minus, km) = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig;
                evaluations += 2;
                // A kink between the probes voids the difference quotient.
                if kp == km || step / 10.0 < MIN_STEP {
                    break (plus - minus) / (2.0 * step);
                }
                if step == h {
                    kink_retries += 1;
                }
                step /= 10.0;
            };
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        params.push(ParamGradError {
            name: store.get(id).name.clone(),
            max_rel_err: worst,
            max_abs_analytic: analytic.data().iter().fold(0.0f64, |m, x| m.max(x.abs())),
        });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, params, evaluations, kink_retries })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks one op: every input becomes a parameter and the output is reduced
/// against a fixed random probe.
pub fn check_op(
    seed: u64,
    shapes: &[&[usize]],
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, KernelError>,
) -> Result<GradCheckReport, KernelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> =
        shapes.iter().enumerate().map(|(i, s)| store.add(format!("in{i}"), random(s, &mut rng))).collect();
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let out = op(&mut tape, &vars)?;
        random(tape.shape(out), &mut rng)
    };
    check_gradients(&mut store, 1e-5, |tape, s| {
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(s, id)).collect();
        let out = op(tape, &vars)?;
        let r = tape.constant(probe.clone());
        let prod = tape.mul(out, r)?;
        Ok(tape.sum_all(prod))
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
}

/// Every differentiable op on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>, KernelError> {
    type Op = fn(&mut Tape<f64>, &[Var]) -> Result<Var, KernelError>;
    let mut mask = Tensor::zeros(&[2, 3, 4]);
    mask.data_mut()[3] = f64::NEG_INFINITY;
    mask.data_mut()[20] = f64::NEG_INFINITY;
    let causal = causal_mask::<f64>(1, 4);
    let cases: Vec<(&'static str, Vec<&[usize]>, Op)> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("batched_matmul", vec![&[2, 3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("broadcast_matmul", vec![&[2, 3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![&[3, 4]], |t, v| t.transpose(v[0])),
        ("add", vec![&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        ("add_row", vec![&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1])),
        ("mul", vec![&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![&[3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("relu", vec![&[3, 4]], |t, v| Ok(t.relu(v[0]))),
        ("softmax", vec![&[3, 5]], |t, v| Ok(t.softmax(v[0]))),
        ("layer_norm", vec![&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2])),
        ("gather", vec![&[5, 3]], |t, v| t.gather(v[0], &[4, 0, 4, 2])),
        ("concat_batched", vec![&[4, 3], &[6, 3]], |t, v| t.concat_batched(v[0], v[1], 2)),
        ("conv_patchify", vec![&[2, 4, 4, 3], &[12, 5]], |t, v| t.conv_patchify(v[0], v[1], 2)),
        ("sum_all", vec![&[3, 4]], |t, v| Ok(t.sum_all(v[0]))),
    ];
    let mut out = Vec::new();
    for (op, shapes, f) in cases {
        let r = check_op(seed, &shapes, f)?;
        out.push(OpCheck { op, seed, max_rel_err: r.max_rel_err });
    }
    let r = check_op(seed, &[&[6, 4], &[8, 4], &[8, 4]], |t, v| t.attention(v[0], v[1], v[2], &mask, 2))?;
    out.push(OpCheck { op: "attention", seed, max_rel_err: r.max_rel_err });
    let r = check_op(seed, &[&[4, 6]], |t, v| t.attention(v[0], v[0], v[0], &causal, 3))?;
    out.push(OpCheck { op: "causal_attention", seed, max_rel_err: r.max_rel_err });
    let r = check_op(seed, &[&[4, 6]], |t, v| t.cross_entropy_masked(v[0], &[0, 5, 2, 3], &[1., 1., 0., 1.]))?;
    out.push(OpCheck { op: "cross_entropy_masked", seed, max_rel_err: r.max_rel_err });
    Ok(out)
}
