//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_tape, random_image, EncoderConfig, EncoderParams, EncoderVars, InsertionPoint,
};
use crate::error::{Error, Result};
use crate::grid::CompressionRatio;
use crate::pml::{merge_forward_tape, GridVar, MergerVariant, PmlParams, PmlVars};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator. Coordinates whose true
/// derivative is zero (the attention key bias, for one) leave only the
/// central difference's roundoff, around 1e-10 here; below the floor the
/// comparison is effectively absolute.
pub const REL_FLOOR: f64 = 1e-4;

/// A parameter coordinate: (tensor index, element index).
pub type Coord = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate of the worst error, if any coordinate was checked.
    pub worst: Option<Coord>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor], grad: bool) -> Result<(GradTape, Vec<Var>, Var, f64)>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad(grad)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function value is {v}")));
    }
    Ok((tape, vars, out, v))
}

/// Compares tape gradients against central differences on every element.
pub fn gradient_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let coords: Vec<Coord> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    gradient_check_at(f, params, step, &coords)
}

/// Compares tape gradients against central differences on `coords` only.
pub fn gradient_check_at<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    coords: &[Coord],
) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let (tape, vars, out, _) = evaluate(&f, params, true)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &(ti, ei) in coords {
        let analytic = grads
            .get(vars[ti])
            .map(|g| g.data()[ei])
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {ti}")))?;
        let orig = work[ti].data()[ei];
        work[ti].data_mut()[ei] = orig + step;
        let plus = evaluate(&f, &work, false)?.3;
        work[ti].data_mut()[ei] = orig - step;
        let minus = evaluate(&f, &work, false)?.3;
        work[ti].data_mut()[ei] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((ti, ei));
        }
    }
    Ok(report)
}

/// Draws `count` distinct coordinates uniformly over all parameter elements
/// (all of them when there are fewer).
pub fn sample_coords(params: &[Tensor], count: usize, seed: u64) -> Vec<Coord> {
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, count.min(total)).into_vec();
    picks.sort_unstable();
    let mut coords = Vec::with_capacity(picks.len());
    let (mut ti, mut base) = (0, 0);
    for flat in picks {
        while flat >= base + params[ti].len() {
            base += params[ti].len();
            ti += 1;
        }
        coords.push((ti, flat - base));
    }
    coords
}

/// Fixed random readout so the checked scalar depends on every output
/// element with a distinct weight.
fn readout(tape: &mut GradTape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = Tensor::uniform(tape.shape(out), 1.0, &mut rng);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Checks the merge layer on a random `grid_edge x grid_edge x width`
/// input, differentiating with respect to the input grid and all four
/// merger tensors at `coords` sampled points. `PmlOnly` checks the bare
/// MLP branch.
pub fn check_merger(
    cfg: &EncoderConfig,
    r: CompressionRatio,
    variant: MergerVariant,
    seed: u64,
    coords: usize,
    step: f64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    cfg.check_ratio(r)?;
    let (e, c) = (cfg.grid_edge(), cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::uniform(&[e * e, c], 1.0, &mut rng);
    let pml = PmlParams::random(c, r, cfg.merger_hidden(r), seed.wrapping_add(1));
    let mut params = vec![input];
    params.extend(pml.tensors().into_iter().cloned());
    let picks = sample_coords(&params, coords, seed.wrapping_add(2));
    gradient_check_at(
        |tape, v| {
            let g = GridVar {
                tokens: v[0],
                height: e,
                width: e,
                channels: c,
            };
            let vars = PmlVars::from_slice(&v[1..]);
            let out = merge_forward_tape(tape, g, Some(&vars), r, variant)?;
            readout(tape, out.tokens, seed)
        },
        &params,
        step,
        &picks,
    )
}

/// Checks a full encode (stem, blocks, merge at `ip`) with respect to every
/// encoder and merger weight at `coords` sampled points.
pub fn check_encode(
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
    seed: u64,
    coords: usize,
    step: f64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    cfg.check_ratio(r)?;
    let params = EncoderParams::random(cfg, r, seed)?.to_tensors();
    let image = random_image(cfg, seed.wrapping_add(3));
    let picks = sample_coords(&params, coords, seed.wrapping_add(2));
    gradient_check_at(
        |tape, v| {
            let vars = EncoderVars::from_slice(v, cfg.layers);
            let img = tape.constant(image.clone());
            let mut trace = Vec::new();
            let out = encode_tape(tape, img, &vars, cfg, ip, r, variant, &mut trace)?;
            readout(tape, out.tokens, seed)
        },
        &params,
        step,
        &picks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn quadratic_form_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let x = Tensor::uniform(&[4, 1], 1.0, &mut rng);
        let report = gradient_check(
            |tape, v| {
                let a = tape.constant(a.clone());
                let ax = tape.matmul(a, v[0])?;
                let xx = tape.mul(ax, v[0])?;
                Ok(tape.sum(xx))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn zero_function_has_zero_error() {
        let x = Tensor::filled(&[3], 2.0);
        let report = gradient_check(
            |tape, v| {
                let s = tape.sum(v[0]);
                Ok(tape.scale(s, 0.0))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(&[3, 4], 1.5, &mut rng);
        let w = Tensor::uniform(&[4, 6], 1.0, &mut rng);
        let b = Tensor::uniform(&[6], 0.5, &mut rng);
        let gain = Tensor::uniform(&[6], 1.0, &mut rng).map(|v| v + 1.5);
        let lnb = Tensor::uniform(&[6], 0.3, &mut rng);
        let c: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights = Tensor::new(vec![3, 6], c).unwrap();
        let report = gradient_check(
            |tape, v| {
                let h = tape.affine(v[0], v[1], v[2])?;
                let h = tape.layer_norm(h, v[3], v[4], 1e-5)?;
                let g = tape.gelu(h);
                let s = tape.softmax_last_axis(g);
                let left = tape.slice_cols(s, 0, 2)?;
                let right = tape.slice_cols(h, 2, 4)?;
                let cat = tape.concat_cols(&[right, left])?;
                let t = tape.transpose(cat)?;
                let t = tape.transpose(t)?;
                let r = tape.reshape(t, &[18])?;
                let r = tape.reshape(r, &[3, 6])?;
                let wv = tape.constant(weights.clone());
                let prod = tape.mul(r, wv)?;
                let diff = tape.sub(prod, g)?;
                let sq = tape.mul(diff, diff)?;
                let s = tape.sum(sq);
                Ok(tape.scale(s, 0.7))
            },
            &[x, w, b, gain, lnb],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn gather_and_channel_average_gradients() {
        use crate::grid::{pixel_shuffle_index, CompressionRatio};
        let r = CompressionRatio::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[16, 3], 1.0, &mut rng);
        let wts = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let index: std::sync::Arc<[usize]> = pixel_shuffle_index(4, 4, 3, r).unwrap().into();
        let report = gradient_check(
            |tape, v| {
                let s = tape.gather(v[0], index.clone(), &[4, 12])?;
                let a = tape.channel_average(s, r)?;
                let w = tape.constant(wts.clone());
                let p = tape.mul(a, w)?;
                let q = tape.mul(p, a)?;
                Ok(tape.sum(q))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::filled(&[1], 1.0);
        let err = gradient_check(
            |tape, v| {
                let s = tape.sum(v[0]);
                Ok(tape.scale(s, f64::INFINITY))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn sampled_coords_are_distinct_and_in_range() {
        let params = vec![
            Tensor::zeros(&[3]),
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[5]),
        ];
        let coords = sample_coords(&params, 7, 1);
        assert_eq!(coords.len(), 7);
        for &(t, e) in &coords {
            assert!(e < params[t].len());
        }
        let mut dedup = coords.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 7);
        assert_eq!(sample_coords(&params, 100, 1).len(), 12);
    }

    #[test]
    fn relative_error_floor() {
        assert!(relative_error(0.0, 5e-10) <= 1e-5);
        assert!((relative_error(2.0, 2.002) - 1e-3 / 1.001).abs() < 1e-12);
        assert_eq!(relative_error(0.0, 1e-3), 1.0);
        assert!(relative_error(1e-3, 1.1e-3) > 1e-2);
    }

    #[test]
    fn merger_and_encode_suites_on_tiny_config() {
        let cfg = EncoderConfig::tiny();
        let r = CompressionRatio::new(2).unwrap();
        let ip = InsertionPoint::new(1, cfg.layers).unwrap();
        for seed in 0..20 {
            for variant in [MergerVariant::PmlOnly, MergerVariant::PmlWithResidual] {
                let m = check_merger(&cfg, r, variant, seed, 120, 1e-5).unwrap();
                assert_eq!(m.checked, 120);
                assert!(m.max_rel_error <= 1e-5, "{variant} seed {seed}: {m:?}");
            }
            let e =
                check_encode(&cfg, ip, r, MergerVariant::PmlWithResidual, seed, 120, 1e-5).unwrap();
            assert_eq!(e.checked, 120);
            assert!(e.max_rel_error <= 1e-4, "encode seed {seed}: {e:?}");
        }
    }
}
