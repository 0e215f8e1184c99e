//! Temporal back-end on per-frame feature vectors.
//!
//! Two macaron-style blocks operate on the `[T, C]` sequence: a half-scaled
//! feed-forward sandwich around relative-position multi-head self-attention
//! and a gated depthwise-convolution module, all pre-norm with residuals and
//! a closing layer norm. The module is deliberately free of batch
//! normalization: the convolution branch goes pointwise -> GLU -> depthwise
//! -> SiLU -> pointwise with no normalization between, so it behaves
//! identically for any sequence length and batch composition.
//!
//! The streaming variant drops the attention branch entirely and left-pads
//! the depthwise convolution, making every output frame a function of
//! current and past frames only.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::params::{layer_norm_p, linear, Params};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::stem::Mode;
use crate::swin::LN_EPS;
use crate::tensor::conv::dwconv1d;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalSpec {
    pub dim: usize,
    pub heads: usize,
    /// Feed-forward hidden width (the half-scaled design keeps it at `dim`).
    pub hidden: usize,
    /// Depthwise convolution kernel length.
    pub kernel: usize,
    pub blocks: usize,
    pub dropout: f64,
    /// Causal, attention-free variant.
    pub streaming: bool,
}

impl TemporalSpec {
    pub fn default_512() -> TemporalSpec {
        TemporalSpec {
            dim: 512,
            heads: 16,
            hidden: 512,
            kernel: 15,
            blocks: 2,
            dropout: 0.0,
            streaming: false,
        }
    }
}

/// Sinusoidal relative-position table: row `p` encodes the signed distance
/// `r = p - (t_len - 1)` over `[-(t_len-1), t_len-1]`; even columns are
/// `sin(r * w_i)`, odd columns `cos(r * w_i)` with geometric frequencies.
pub fn sinusoid_table<S: Scalar>(t_len: usize, c: usize) -> Tensor<S> {
    let rows = 2 * t_len - 1;
    let mut data = vec![S::zero(); rows * c];
    for p in 0..rows {
        let r = p as f64 - (t_len as f64 - 1.0);
        for i in 0..c / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / c as f64);
            data[p * c + 2 * i] = S::from_lossy((r * freq).sin());
            data[p * c + 2 * i + 1] = S::from_lossy((r * freq).cos());
        }
    }
    Tensor::from_vec(&[rows, c], data).expect("table shape")
}

fn dropout_maybe<S: Scalar>(
    x: Tensor<S>,
    rate: f64,
    mode: Mode,
    rng: &mut Option<&mut SeededRng>,
) -> Result<Tensor<S>> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    match rng {
        Some(r) => x.dropout(rate, r),
        None => Err(Error::config(
            "training forward with dropout > 0 requires an RNG".to_string(),
        )),
    }
}

/// Relative-position multi-head self-attention on `[T, C]`.
fn rel_mhsa<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    let (t, c) = (x.shape()[0], x.shape()[1]);
    if c % heads != 0 {
        return Err(Error::InvalidShape {
            op: "rel_mhsa",
            msg: format!("dim {c} not divisible by {heads} heads"),
            shape: x.shape().to_vec(),
        });
    }
    let d = c / heads;
    let to_heads = |y: Tensor<S>, rows: usize| -> Result<Tensor<S>> {
        y.reshape(&[rows, heads, d])?.permute(&[1, 0, 2])
    };

    let q = to_heads(linear(params, &format!("{prefix}.q"), x)?, t)?; // [h,T,d]
    let k = to_heads(linear(params, &format!("{prefix}.k"), x)?, t)?;
    let v = to_heads(linear(params, &format!("{prefix}.v"), x)?, t)?;

    let table = sinusoid_table::<S>(t, c); // constant, rebuilt per length
    let r = to_heads(
        table.matmul(params.get(&format!("{prefix}.pos.weight"))?)?,
        2 * t - 1,
    )?; // [h, 2T-1, d]

    let u_bias = params.get(&format!("{prefix}.u_bias"))?.reshape(&[heads, 1, d])?;
    let v_bias = params.get(&format!("{prefix}.v_bias"))?.reshape(&[heads, 1, d])?;

    // content and position score terms
    let ac = q.add(&u_bias)?.matmul_nt(&k)?; // [h,T,T]
    let bd_full = q.add(&v_bias)?.matmul_nt(&r)?; // [h,T,2T-1]

    // gather bd[h,i,j] = bd_full[h, i, (i-j) + T-1]
    let rows = 2 * t - 1;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let p = (i + t - 1 - j) as u32;
                idx.push(((h * t + i) * rows) as u32 + p);
            }
        }
    }
    let bd = bd_full.take_flat(&Arc::new(idx), &[heads, t, t])?;

    let scores = ac.add(&bd)?.scale(1.0 / (d as f64).sqrt())?;
    let attn = scores.softmax(2)?;
    let ctx = attn.matmul(&v)?; // [h,T,d]
    let merged = ctx.permute(&[1, 0, 2])?.reshape(&[t, c])?;
    linear(params, &format!("{prefix}.out"), &merged)
}

/// Feed-forward branch: LN -> linear -> SiLU -> dropout -> linear -> dropout.
fn ffn<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    rate: f64,
    mode: Mode,
    rng: &mut Option<&mut SeededRng>,
) -> Result<Tensor<S>> {
    let y = layer_norm_p(params, &format!("{prefix}.norm"), x, LN_EPS)?;
    let y = linear(params, &format!("{prefix}.fc1"), &y)?.silu()?;
    let y = dropout_maybe(y, rate, mode, rng)?;
    let y = linear(params, &format!("{prefix}.fc2"), &y)?;
    dropout_maybe(y, rate, mode, rng)
}

/// Convolution branch: LN -> pointwise 2C + GLU -> depthwise -> SiLU ->
/// pointwise -> dropout. No normalization after the depthwise stage.
fn conv_module<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    causal: bool,
    rate: f64,
    mode: Mode,
    rng: &mut Option<&mut SeededRng>,
) -> Result<Tensor<S>> {
    let y = layer_norm_p(params, &format!("{prefix}.norm"), x, LN_EPS)?;
    let y = linear(params, &format!("{prefix}.pw1"), &y)?.glu()?;
    let y = dwconv1d(
        &y,
        params.get(&format!("{prefix}.dw.weight"))?,
        Some(params.get(&format!("{prefix}.dw.bias"))?),
        causal,
    )?
    .silu()?;
    let y = linear(params, &format!("{prefix}.pw2"), &y)?;
    dropout_maybe(y, rate, mode, rng)
}

/// Insert temporal parameters under `prefix`.
pub fn init_temporal<S: Scalar>(
    params: &mut Params<S>,
    rng: &mut SeededRng,
    prefix: &str,
    spec: &TemporalSpec,
) -> Result<()> {
    let c = spec.dim;
    if c % spec.heads != 0 {
        return Err(Error::config(format!(
            "temporal dim {c} not divisible by heads {}",
            spec.heads
        )));
    }
    if c % 2 != 0 {
        return Err(Error::config(format!(
            "temporal dim {c} must be even for the sinusoid table"
        )));
    }
    for b in 0..spec.blocks {
        let bp = format!("{prefix}.b{b}");
        for f in ["ffn1", "ffn2"] {
            params.init_layer_norm(&format!("{bp}.{f}.norm"), c)?;
            params.init_linear(rng, &format!("{bp}.{f}.fc1"), c, spec.hidden, true)?;
            params.init_linear(rng, &format!("{bp}.{f}.fc2"), spec.hidden, c, true)?;
        }
        if !spec.streaming {
            let mp = format!("{bp}.mhsa");
            params.init_layer_norm(&format!("{mp}.norm"), c)?;
            for part in ["q", "k", "v", "out"] {
                params.init_linear(rng, &format!("{mp}.{part}"), c, c, true)?;
            }
            params.init_linear(rng, &format!("{mp}.pos"), c, c, false)?;
            params.init_trunc_normal(rng, format!("{mp}.u_bias"), &[c])?;
            params.init_trunc_normal(rng, format!("{mp}.v_bias"), &[c])?;
        }
        let cp = format!("{bp}.conv");
        params.init_layer_norm(&format!("{cp}.norm"), c)?;
        params.init_linear(rng, &format!("{cp}.pw1"), c, 2 * c, true)?;
        params.init_trunc_normal(rng, format!("{cp}.dw.weight"), &[c, spec.kernel])?;
        params.init_zeros(format!("{cp}.dw.bias"), &[c])?;
        params.init_linear(rng, &format!("{cp}.pw2"), c, c, true)?;
        params.init_layer_norm(&format!("{bp}.final_norm"), c)?;
    }
    Ok(())
}

/// Run the temporal stack on `[T, C]` frame features.
pub fn temporal_forward<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    spec: &TemporalSpec,
    mode: Mode,
    mut rng: Option<&mut SeededRng>,
) -> Result<Tensor<S>> {
    if x.shape().len() != 2 || x.shape()[1] != spec.dim {
        return Err(Error::InvalidShape {
            op: "temporal_forward",
            msg: format!("expected [T, {}]", spec.dim),
            shape: x.shape().to_vec(),
        });
    }
    let rate = spec.dropout;
    let mut x = x.clone();
    for b in 0..spec.blocks {
        let bp = format!("{prefix}.b{b}");
        let f1 = ffn(params, &format!("{bp}.ffn1"), &x, rate, mode, &mut rng)?;
        x = x.add(&f1.scale(0.5)?)?;
        if !spec.streaming {
            let mp = format!("{bp}.mhsa");
            let normed = layer_norm_p(params, &format!("{mp}.norm"), &x, LN_EPS)?;
            let a = rel_mhsa(params, &mp, &normed, spec.heads)?;
            let a = dropout_maybe(a, rate, mode, &mut rng)?;
            x = x.add(&a)?;
        }
        let cv = conv_module(
            params,
            &format!("{bp}.conv"),
            &x,
            spec.streaming,
            rate,
            mode,
            &mut rng,
        )?;
        x = x.add(&cv)?;
        let f2 = ffn(params, &format!("{bp}.ffn2"), &x, rate, mode, &mut rng)?;
        x = x.add(&f2.scale(0.5)?)?;
        x = layer_norm_p(params, &format!("{bp}.final_norm"), &x, LN_EPS)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;

    fn spec_small(streaming: bool) -> TemporalSpec {
        TemporalSpec {
            dim: 8,
            heads: 2,
            hidden: 8,
            kernel: 3,
            blocks: 2,
            dropout: 0.0,
            streaming,
        }
    }

    fn build(spec: &TemporalSpec) -> (Params<f64>, SeededRng) {
        let mut rng = SeededRng::new(70);
        let mut p = Params::new();
        init_temporal(&mut p, &mut rng, "tmp", spec).unwrap();
        (p, rng)
    }

    #[test]
    fn sinusoid_center_row_is_zero_distance() {
        let t = sinusoid_table::<f64>(5, 6);
        assert_eq!(t.shape(), &[9, 6]);
        // r = 0 at row 4: sin(0)=0 on even cols, cos(0)=1 on odd cols
        for i in 0..3 {
            assert_eq!(t.at(&[4, 2 * i]), 0.0);
            assert_eq!(t.at(&[4, 2 * i + 1]), 1.0);
        }
        // antisymmetric sin, symmetric cos around the center
        for p in 0..9usize {
            let q = 8 - p;
            for i in 0..3 {
                assert!((t.at(&[p, 2 * i]) + t.at(&[q, 2 * i])).abs() < 1e-12);
                assert!((t.at(&[p, 2 * i + 1]) - t.at(&[q, 2 * i + 1])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for streaming in [false, true] {
            let spec = spec_small(streaming);
            let (p, mut rng) = build(&spec);
            let x: Tensor<f64> = rng.normal_tensor(&[6, 8], 0.0, 1.0);
            let y1 = temporal_forward(&p, "tmp", &x, &spec, Mode::Eval, None).unwrap();
            let y2 = temporal_forward(&p, "tmp", &x, &spec, Mode::Eval, None).unwrap();
            assert_eq!(y1.shape(), &[6, 8]);
            assert!(y1.bits_eq(&y2));
        }
    }

    #[test]
    fn streaming_variant_has_no_attention_parameters() {
        let (full, _) = build(&spec_small(false));
        let (stream, _) = build(&spec_small(true));
        assert!(full.names().any(|n| n.contains("mhsa")));
        assert!(!stream.names().any(|n| n.contains("mhsa")));
        assert!(stream.total_elems() < full.total_elems());
    }

    #[test]
    fn streaming_output_ignores_future_frames() {
        let spec = spec_small(true);
        let (p, mut rng) = build(&spec);
        let x1: Tensor<f64> = rng.normal_tensor(&[7, 8], 0.0, 1.0);
        // perturb single channels of frames 5 and 6 (a uniform shift across
        // all channels would be erased by the layer norms)
        let mut xv = x1.to_vec();
        xv[5 * 8] += 3.0;
        xv[6 * 8 + 3] -= 2.0;
        let x2 = Tensor::from_vec(&[7, 8], xv).unwrap();
        let y1 = temporal_forward(&p, "tmp", &x1, &spec, Mode::Eval, None).unwrap();
        let y2 = temporal_forward(&p, "tmp", &x2, &spec, Mode::Eval, None).unwrap();
        for t in 0..5 {
            for c in 0..8 {
                assert_eq!(y1.at(&[t, c]), y2.at(&[t, c]), "frame {t} leaked");
            }
        }
        assert_ne!(y1.at(&[5, 0]), y2.at(&[5, 0]));
    }

    #[test]
    fn full_variant_attends_globally() {
        // with attention, changing the last frame changes the first output
        let spec = spec_small(false);
        let (p, mut rng) = build(&spec);
        let x1: Tensor<f64> = rng.normal_tensor(&[7, 8], 0.0, 1.0);
        let mut xv = x1.to_vec();
        xv[6 * 8] += 3.0;
        let x2 = Tensor::from_vec(&[7, 8], xv).unwrap();
        let y1 = temporal_forward(&p, "tmp", &x1, &spec, Mode::Eval, None).unwrap();
        let y2 = temporal_forward(&p, "tmp", &x2, &spec, Mode::Eval, None).unwrap();
        assert_ne!(y1.at(&[0, 0]), y2.at(&[0, 0]));
    }

    /// Dense oracle for the relative-position attention on tiny sizes.
    #[test]
    fn rel_mhsa_matches_dense_oracle() {
        let (t, c, heads) = (5usize, 8usize, 2usize);
        let d = c / heads;
        let mut rng = SeededRng::new(71);
        let mut p = Params::<f64>::new();
        p.init_layer_norm("m.norm", c).unwrap();
        for part in ["q", "k", "v", "out"] {
            p.init_linear(&mut rng, &format!("m.{part}"), c, c, true).unwrap();
        }
        p.init_linear(&mut rng, "m.pos", c, c, false).unwrap();
        p.init_trunc_normal(&mut rng, "m.u_bias", &[c]).unwrap();
        p.init_trunc_normal(&mut rng, "m.v_bias", &[c]).unwrap();
        // scale the biases up so their terms are clearly visible
        for n in ["m.u_bias", "m.v_bias"] {
            let big = p.get(n).unwrap().scale(30.0).unwrap();
            p.set(n, big).unwrap();
        }
        let x: Tensor<f64> = rng.normal_tensor(&[t, c], 0.0, 1.0);
        let got = rel_mhsa(&p, "m", &x, heads).unwrap();

        // oracle with plain loops
        let table = sinusoid_table::<f64>(t, c);
        let proj = |w: &Tensor<f64>, b: Option<&Tensor<f64>>, src: &Tensor<f64>, i: usize, o: usize| {
            let mut acc = b.map(|b| b.at(&[o])).unwrap_or(0.0);
            for pp in 0..c {
                acc += src.at(&[i, pp]) * w.at(&[pp, o]);
            }
            acc
        };
        let wq = p.get("m.q.weight").unwrap();
        let bq = p.get("m.q.bias").unwrap();
        let wk = p.get("m.k.weight").unwrap();
        let bk = p.get("m.k.bias").unwrap();
        let wv = p.get("m.v.weight").unwrap();
        let bv = p.get("m.v.bias").unwrap();
        let wp = p.get("m.pos.weight").unwrap();
        let wu = p.get("m.u_bias").unwrap();
        let wvb = p.get("m.v_bias").unwrap();
        let wo = p.get("m.out.weight").unwrap();
        let bo = p.get("m.out.bias").unwrap();

        let mut heads_out = vec![0.0; t * c];
        for h in 0..heads {
            for i in 0..t {
                let mut row = vec![0.0; t];
                for j in 0..t {
                    let mut ac = 0.0;
                    let mut bd = 0.0;
                    for dd in 0..d {
                        let o = h * d + dd;
                        let qv = proj(wq, Some(bq), &x, i, o);
                        let kv = proj(wk, Some(bk), &x, j, o);
                        ac += (qv + wu.at(&[o])) * kv;
                        // relative row for distance i-j
                        let prow = i + t - 1 - j;
                        let rv = proj(wp, None, &table, prow, o);
                        bd += (qv + wvb.at(&[o])) * rv;
                    }
                    row[j] = (ac + bd) / (d as f64).sqrt();
                }
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps: Vec<f64> = row.iter().map(|&s| (s - mx).exp()).collect();
                let tot: f64 = exps.iter().sum();
                for dd in 0..d {
                    let o = h * d + dd;
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += exps[j] / tot * proj(wv, Some(bv), &x, j, o);
                    }
                    heads_out[i * c + o] = acc;
                }
            }
        }
        for i in 0..t {
            for o in 0..c {
                let mut acc = bo.at(&[o]);
                for pp in 0..c {
                    acc += heads_out[i * c + pp] * wo.at(&[pp, o]);
                }
                let g = got.at(&[i, o]);
                assert!((g - acc).abs() < 1e-9, "({i},{o}): {g} vs {acc}");
            }
        }
    }

    #[test]
    fn single_frame_sequence_works() {
        for streaming in [false, true] {
            let spec = spec_small(streaming);
            let (p, mut rng) = build(&spec);
            let x: Tensor<f64> = rng.normal_tensor(&[1, 8], 0.0, 1.0);
            let y = temporal_forward(&p, "tmp", &x, &spec, Mode::Eval, None).unwrap();
            assert_eq!(y.shape(), &[1, 8]);
        }
    }

    #[test]
    fn gradients_reach_all_temporal_parameters() {
        for streaming in [false, true] {
            let spec = spec_small(streaming);
            let (p, mut rng) = build(&spec);
            let x: Tensor<f64> = rng.normal_tensor(&[5, 8], 0.0, 1.0);
            let tape = Tape::<f64>::new();
            let taped = p.bind_to_tape(&tape).unwrap();
            let y = temporal_forward(&taped, "tmp", &x, &spec, Mode::Eval, None).unwrap();
            let loss = y.mean_all().unwrap();
            let grads = Tape::backward(&loss).unwrap();
            for (name, t) in taped.iter() {
                let g = grads.wrt(t).unwrap();
                assert!(
                    g.data().iter().any(|&v| v != 0.0),
                    "no gradient reached `{name}` (streaming={streaming})"
                );
            }
        }
    }

    #[test]
    fn full_width_parameter_counts_are_frozen() {
        // dim 512, heads 16, hidden 512, kernel 15, two blocks
        let mut rng = SeededRng::new(3);
        let mut p = Params::<f32>::new();
        init_temporal(&mut p, &mut rng, "tmp", &TemporalSpec::default_512()).unwrap();
        assert_eq!(p.total_elems(), 6_331_392);

        let count = |pp: &Params<f32>, frag: &str| -> usize {
            pp.iter()
                .filter(|(n, _)| n.contains(frag))
                .map(|(_, t)| t.numel())
                .sum()
        };
        assert_eq!(count(&p, ".b0.ffn1."), 526_336);
        assert_eq!(count(&p, ".b0.mhsa."), 1_314_816);
        assert_eq!(count(&p, ".b0.conv."), 797_184);
        assert_eq!(count(&p, ".b0."), 3_165_696);

        let mut stream = TemporalSpec::default_512();
        stream.streaming = true;
        let mut ps = Params::<f32>::new();
        init_temporal(&mut ps, &mut rng, "tmp", &stream).unwrap();
        assert_eq!(ps.total_elems(), 3_701_760);
    }

    #[test]
    fn dropout_train_requires_rng() {
        let mut spec = spec_small(false);
        spec.dropout = 0.1;
        let (p, mut rng) = build(&spec);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 8], 0.0, 1.0);
        assert!(temporal_forward(&p, "tmp", &x, &spec, Mode::Train, None).is_err());
        let mut r2 = SeededRng::new(9);
        assert!(temporal_forward(&p, "tmp", &x, &spec, Mode::Train, Some(&mut r2)).is_ok());
        // eval ignores dropout entirely
        assert!(temporal_forward(&p, "tmp", &x, &spec, Mode::Eval, None).is_ok());
    }
}
