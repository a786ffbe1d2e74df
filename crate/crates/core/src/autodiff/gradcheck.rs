//! Finite-difference verification of tape gradients.

use super::{Tape, Value, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Worst absolute difference.
    pub max_abs_error: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol || self.max_abs_error <= tol * 1e-3
    }
}

/// Compares backprop against central differences for `f` at `inputs`.
///
/// The output of `f` (any shape, real or complex) is reduced to a scalar with
/// a fixed random projection, so every output coordinate contributes. Each
/// real coordinate of each input (both planes for complex inputs) is
/// perturbed by `±step`.
pub fn grad_check<F>(f: F, inputs: &[Value<f64>], step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(seed);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).clone()
    };
    let proj_re: Tensor<f64> = rng.sample_gaussian(probe.shape());
    let proj_im: Tensor<f64> = rng.sample_gaussian(probe.shape());

    let objective = |tape: &mut Tape<f64>, out: Var| -> Result<Var> {
        match tape.value(out).clone() {
            Value::Real(_) => tape.dot_const(out, proj_re.clone()),
            Value::Complex(_) => {
                let re = tape.real_part(out)?;
                let im = tape.imag_part(out)?;
                let a = tape.dot_const(re, proj_re.clone())?;
                let b = tape.dot_const(im, proj_im.clone())?;
                tape.add(a, b)
            }
        }
    };
    let eval = |vals: &[Value<f64>]| -> Result<f64> {
        let mut tape = Tape::new().with_finite_check(false);
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let l = objective(&mut tape, out)?;
        Ok(tape.real(l)?.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = objective(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    for (k, input) in inputs.iter().enumerate() {
        let planes = if input.is_complex() { 2 } else { 1 };
        let len = match input {
            Value::Real(t) => t.len(),
            Value::Complex(z) => z.len(),
        };
        let analytic = grads.get(vars[k]);
        for plane in 0..planes {
            for i in 0..len {
                let a = match analytic {
                    None => 0.0,
                    Some(Value::Real(g)) => g.data()[i],
                    Some(Value::Complex(g)) => if plane == 0 { g.re().data()[i] } else { g.im().data()[i] },
                };
                let mut vals = inputs.to_vec();
                vals[k] = perturb(input, plane, i, step);
                let plus = eval(&vals)?;
                vals[k] = perturb(input, plane, i, -step);
                let minus = eval(&vals)?;
                let n = (plus - minus) / (2.0 * step);
                if !n.is_finite() || !a.is_finite() {
                    return Err(Error::NonFinite("grad_check".into()));
                }
                let abs = (a - n).abs();
                let rel = abs / a.abs().max(n.abs()).max(1e-8);
                report.max_abs_error = report.max_abs_error.max(abs);
                report.max_rel_error = report.max_rel_error.max(rel);
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

fn perturb(v: &Value<f64>, plane: usize, i: usize, h: f64) -> Value<f64> {
    match v {
        Value::Real(t) => {
            let mut t = t.clone();
            t.data_mut()[i] += h;
            Value::Real(t)
        }
        Value::Complex(z) => {
            let (mut re, mut im) = z.clone().into_parts();
            if plane == 0 {
                re.data_mut()[i] += h;
            } else {
                im.data_mut()[i] += h;
            }
            Value::Complex(ComplexTensor::new(re, im).expect("same shapes"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NormStats;

    fn rv(rng: &mut Rng, shape: &[usize]) -> Value<f64> {
        Value::Real(rng.sample_gaussian(shape))
    }

    fn cv(rng: &mut Rng, shape: &[usize]) -> Value<f64> {
        Value::Complex(ComplexTensor::new(rng.sample_gaussian(shape), rng.sample_gaussian(shape)).unwrap())
    }

    fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Value<f64>]) {
        let rep = grad_check(f, inputs, 1e-5, 99).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
        assert!(rep.checked > 0);
    }

    #[test]
    fn real_conv_with_bias() {
        let mut rng = Rng::new(1);
        let ins = [rv(&mut rng, &[2, 2, 5, 5]), rv(&mut rng, &[3, 2, 3, 3]), rv(&mut rng, &[3])];
        check(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1), &ins);
    }

    #[test]
    fn complex_conv_and_rotate() {
        let mut rng = Rng::new(2);
        let ins = [cv(&mut rng, &[2, 2, 4, 4]), rv(&mut rng, &[2, 2, 3, 3])];
        check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 1)?;
                t.rotate(y, &[0.3, -1.2])
            },
            &ins,
        );
    }

    #[test]
    fn delta_fixed_and_channelwise() {
        let mut rng = Rng::new(3);
        let ins = [cv(&mut rng, &[2, 3, 3, 3])];
        check(|t, v| t.delta(v[0], &[1.0]), &ins);
        check(|t, v| t.delta(v[0], &[0.5, 1.3, 2.0]), &ins);
    }

    #[test]
    fn complex_norm_batch_and_fixed() {
        let mut rng = Rng::new(4);
        let ins = [cv(&mut rng, &[3, 2, 2, 2])];
        check(|t, v| Ok(t.complex_norm(v[0], NormStats::Batch, 1e-8)?.0), &ins);
        check(|t, v| Ok(t.complex_norm(v[0], NormStats::Fixed(vec![0.7, 2.0]), 1e-8)?.0), &ins);
    }

    #[test]
    fn batch_norm_and_linear() {
        let mut rng = Rng::new(5);
        let ins = [rv(&mut rng, &[4, 2, 2, 2]), rv(&mut rng, &[2]), rv(&mut rng, &[2]), rv(&mut rng, &[3, 8]), rv(&mut rng, &[3])];
        check(
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
                t.linear(y, v[3], Some(v[4]))
            },
            &ins,
        );
    }

    #[test]
    fn pooling_and_resampling() {
        let mut rng = Rng::new(6);
        let ins = [cv(&mut rng, &[1, 2, 4, 4])];
        check(|t, v| t.mag_maxpool(v[0], 2, 2), &ins);
        check(|t, v| t.avgpool(v[0], 2, 2, 2), &ins);
        let real = [rv(&mut rng, &[1, 2, 4, 4])];
        check(|t, v| t.maxpool(v[0], 2, 2), &real);
        check(
            |t, v| {
                let u = t.upsample(v[0], 2)?;
                let p = t.pad2d(u, 1)?;
                t.concat_channels(p, p)
            },
            &real,
        );
    }

    #[test]
    fn losses_and_activations() {
        let mut rng = Rng::new(7);
        let ins = [rv(&mut rng, &[3, 4])];
        check(|t, v| t.cross_entropy(v[0], &[0, 3, 1]), &ins);
        check(|t, v| t.mse(v[0], &Tensor::zeros(&[3, 4])), &ins);
        check(|t, v| t.sigmoid(v[0]), &ins);
        check(|t, v| t.leaky_relu(v[0], 0.2), &ins);
        check(
            |t, v| {
                let s = t.select_batch(v[0], &[2, 0, 2])?;
                t.concat_batch(&[s, v[0]])
            },
            &ins,
        );
    }

    #[test]
    fn complex_assembly() {
        let mut rng = Rng::new(8);
        let ins = [rv(&mut rng, &[2, 3]), rv(&mut rng, &[2, 3])];
        check(
            |t, v| {
                let z = t.complex(v[0], v[1])?;
                let r = t.rotate(z, &[0.9])?;
                let a = t.real_part(r)?;
                let b = t.imag_part(r)?;
                let p = t.mul(a, b)?;
                t.sub(p, a)
            },
            &ins,
        );
    }
}
