//! Sigmoid pair losses, computed chunk by chunk as if each simulated device
//! held one slice of the batch, plus the Matryoshka prefix wrapper.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, NORM_EPS};

/// `log(1 + exp(z * (c - t * sim)))` in plain `f64`.
pub fn pairwise_sigmoid_loss(sim: f64, z: f64, t: f64, c: f64) -> f64 {
    crate::tensor::softplus(z * (c - t * sim))
}

/// Mean sigmoid loss over every row pair of `x: [n, d]` and `y: [n, d]`,
/// with row `i` of `x` matching only row `i` of `y`.
///
/// Each of the `devices` chunks of `x` is scored against every chunk of `y`
/// in turn, so no `n × n` block is ever formed. Chunk sums are reduced in
/// (query chunk, key chunk) order.
pub fn chunked_pair_loss(
    tape: &mut Tape,
    x: Var,
    y: Var,
    t: Var,
    c: Var,
    devices: usize,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ys = tape.shape(y).to_vec();
    if xs.len() != 2 || xs != ys {
        return Err(Error::Precondition(format!(
            "pair loss needs matching [n, d] inputs, got {xs:?} and {ys:?}"
        )));
    }
    let n = xs[0];
    if devices == 0 || n == 0 || n % devices != 0 {
        return Err(Error::Precondition(format!(
            "batch of {n} is not divisible across {devices} devices"
        )));
    }
    let b = n / devices;
    let flip = tape.constant(diagonal_flip(b))?;
    let x_chunks = chunks(tape, x, devices, b)?;
    let y_chunks = chunks(tape, y, devices, b)?;

    let mut total: Option<Var> = None;
    for (di, &xi) in x_chunks.iter().enumerate() {
        for (dj, &yj) in y_chunks.iter().enumerate() {
            let yt = tape.transpose(yj)?;
            let sim = tape.matmul(xi, yt)?;
            let ts = tape.mul(sim, t)?;
            // z (c - t sim) = -z (t sim - c); off-diagonal chunks have z = -1
            let mut arg = tape.sub(ts, c)?;
            if di == dj {
                arg = tape.mul(arg, flip)?;
            }
            let l = tape.log1p_exp(arg)?;
            let s = tape.sum(l)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    let total = total.expect("at least one chunk");
    Ok(tape.scale(total, 1.0 / (n * n) as f64)?)
}

/// `-z` for a diagonal chunk: −1 on the diagonal, +1 elsewhere.
fn diagonal_flip(b: usize) -> Tensor {
    let mut t = Tensor::full([b, b], 1.0);
    for i in 0..b {
        t.data_mut()[i * b + i] = -1.0;
    }
    t
}

fn chunks(tape: &mut Tape, x: Var, devices: usize, b: usize) -> Result<Vec<Var>> {
    if devices == 1 {
        return Ok(vec![x]);
    }
    (0..devices)
        .map(|d| Ok(tape.slice(x, 0, d * b, (d + 1) * b)?))
        .collect()
}

/// Image-to-text loss over a batch of image rows `x` and their texts `y`.
pub fn i2t_loss(tape: &mut Tape, x: Var, y: Var, t: Var, c: Var, devices: usize) -> Result<Var> {
    chunked_pair_loss(tape, x, y, t, c, devices)
}

/// Neighbor loss between fused query rows `u` and positive rows `v`.
pub fn p2p_loss(tape: &mut Tape, u: Var, v: Var, t: Var, c: Var, devices: usize) -> Result<Var> {
    if tape.shape(u)[0] != tape.shape(v)[0] {
        return Err(Error::Precondition(format!(
            "{} queries but {} positives",
            tape.shape(u)[0],
            tape.shape(v)[0]
        )));
    }
    chunked_pair_loss(tape, u, v, t, c, devices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrlConfig {
    /// `(k, c_k)` pairs, strictly increasing in `k`, the last equal to `d`.
    pub prefixes: Vec<(usize, f64)>,
    pub use_projection_heads: bool,
}

impl MrlConfig {
    /// Prefixes `d/4`, `d/2`, `d` weighted 0.1, 0.1, 1.0.
    pub fn default_for(d: usize) -> Self {
        Self {
            prefixes: vec![(d / 4, 0.1), (d / 2, 0.1), (d, 1.0)],
            use_projection_heads: false,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.prefixes.is_empty() {
            return Err(Error::Config("mrl prefixes must not be empty".into()));
        }
        for w in self.prefixes.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("mrl prefixes must be strictly increasing".into()));
            }
        }
        if let Some(&(k, _)) = self.prefixes.iter().find(|(k, _)| *k == 0 || *k > d) {
            return Err(Error::Config(format!("mrl prefix {k} outside 1..={d}")));
        }
        if self.prefixes.last().map(|p| p.0) != Some(d) {
            return Err(Error::Config(format!("largest mrl prefix must equal d = {d}")));
        }
        if let Some(&(_, w)) = self.prefixes.iter().find(|(_, w)| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("mrl weight {w} must be positive")));
        }
        Ok(())
    }
}

/// Leading `k` columns of unit rows, optionally projected, renormalized.
/// The full width without a head is returned untouched.
pub fn prefix_rows(tape: &mut Tape, x: Var, k: usize, head: Option<Var>) -> Result<Var> {
    let d = tape.shape(x)[1];
    if k == 0 || k > d {
        return Err(Error::Precondition(format!("prefix {k} outside 1..={d}")));
    }
    if k == d && head.is_none() {
        return Ok(x);
    }
    let mut h = if k == d { x } else { tape.slice(x, 1, 0, k)? };
    if let Some(w) = head {
        h = tape.matmul(h, w)?;
    }
    Ok(tape.l2_normalize(h, 1, NORM_EPS)?)
}

/// `Σ c_k L_k`, where `L_k` is `base` on the `k`-prefixes of both inputs.
/// Returns the weighted sum and the unweighted per-prefix losses.
pub fn mrl_loss<F>(
    tape: &mut Tape,
    x: Var,
    y: Var,
    cfg: &MrlConfig,
    heads: &[(usize, Var)],
    mut base: F,
) -> Result<(Var, Vec<Var>)>
where
    F: FnMut(&mut Tape, Var, Var) -> Result<Var>,
{
    cfg.validate(tape.shape(x)[1])?;
    let mut total: Option<Var> = None;
    let mut parts = Vec::with_capacity(cfg.prefixes.len());
    for &(k, weight) in &cfg.prefixes {
        let head = if cfg.use_projection_heads {
            let h = heads.iter().find(|(hk, _)| *hk == k).map(|&(_, v)| v);
            if h.is_none() {
                return Err(Error::Config(format!("no projection head for prefix {k}")));
            }
            h
        } else {
            None
        };
        let xk = prefix_rows(tape, x, k, head)?;
        let yk = prefix_rows(tape, y, k, head)?;
        let lk = base(tape, xk, yk)?;
        parts.push(lk);
        let weighted = tape.scale(lk, weight)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok((total.expect("validated non-empty"), parts))
}

/// Which objectives are active and how they are wrapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub i2t: bool,
    pub p2p: bool,
    pub mrl: Option<MrlConfig>,
}

/// Rows entering one pair objective, plus its (t, c) handles.
#[derive(Debug, Clone, Copy)]
pub struct PairInputs {
    pub x: Var,
    pub y: Var,
    pub t: Var,
    pub c: Var,
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub i2t: Option<Var>,
    pub p2p: Option<Var>,
    /// Unweighted per-prefix losses of each objective when MRL is on.
    pub i2t_prefixes: Vec<Var>,
    pub p2p_prefixes: Vec<Var>,
}

/// `L = L_I2T + L_P2P` with each term optionally MRL-wrapped. An objective
/// is skipped when disabled in `cfg` or when its inputs are absent.
pub fn total_loss(
    tape: &mut Tape,
    cfg: &LossConfig,
    i2t: Option<PairInputs>,
    p2p: Option<PairInputs>,
    heads: &[(usize, Var)],
    devices: usize,
) -> Result<LossTerms> {
    let i2t = i2t.filter(|_| cfg.i2t);
    let p2p = p2p.filter(|_| cfg.p2p);
    if !cfg.i2t && !cfg.p2p {
        return Err(Error::Config("both objectives are disabled".into()));
    }
    let term = |tape: &mut Tape, inp: PairInputs| -> Result<(Var, Vec<Var>)> {
        let base = |tape: &mut Tape, a: Var, b: Var| chunked_pair_loss(tape, a, b, inp.t, inp.c, devices);
        match &cfg.mrl {
            Some(m) => mrl_loss(tape, inp.x, inp.y, m, heads, base),
            None => Ok((base(tape, inp.x, inp.y)?, Vec::new())),
        }
    };
    let (l_i2t, i2t_prefixes) = match i2t {
        Some(inp) => {
            let (l, p) = term(tape, inp)?;
            (Some(l), p)
        }
        None => (None, Vec::new()),
    };
    let (l_p2p, p2p_prefixes) = match p2p {
        Some(inp) => {
            let (l, p) = term(tape, inp)?;
            (Some(l), p)
        }
        None => (None, Vec::new()),
    };
    let total = match (l_i2t, l_p2p) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => {
            return Err(Error::Precondition("no objective has inputs this step".into()));
        }
    };
    Ok(LossTerms {
        total,
        i2t: l_i2t,
        p2p: l_p2p,
        i2t_prefixes,
        p2p_prefixes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::normal_tensor;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const T0: f64 = std::f64::consts::LN_10;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut t = normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[n, d], 1.0);
        for row in t.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        t
    }

    /// Full-matrix reference in plain f64.
    fn oracle(x: &Tensor, y: &Tensor, t: f64, c: f64) -> f64 {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let sim: f64 = (0..d).map(|k| x.data()[i * d + k] * y.data()[j * d + k]).sum();
                let z = if i == j { 1.0 } else { -1.0 };
                total += pairwise_sigmoid_loss(sim, z, t, c);
            }
        }
        total / (n * n) as f64
    }

    fn chunked(x: &Tensor, y: &Tensor, t: f64, c: f64, devices: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let yv = tape.constant(y.clone())?;
        let tv = tape.constant(Tensor::scalar(t))?;
        let cv = tape.constant(Tensor::scalar(c))?;
        let l = chunked_pair_loss(&mut tape, xv, yv, tv, cv, devices)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn pointwise_reference_values() {
        // 50-digit references for log(1 + e^{±(c - t)}), t = ln 10, c = -10
        let pos = pairwise_sigmoid_loss(1.0, 1.0, T0, -10.0);
        assert!((pos - 4.539_982_670_5e-6).abs() < 1e-9, "{pos}");
        let neg = pairwise_sigmoid_loss(1.0, -1.0, T0, -10.0);
        assert!((neg - 12.302_589_632_976_71).abs() < 1e-5, "{neg}");
        for sim in [-1.0, -0.3, 0.0, 0.8, 1.0] {
            for z in [1.0, -1.0] {
                assert_eq!(pairwise_sigmoid_loss(sim, z, 0.0, 0.0), std::f64::consts::LN_2);
            }
        }
    }

    #[test]
    fn two_pin_hand_computation() {
        let x = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = 0.5f64.sqrt();
        let y = Tensor::new([2, 2], vec![s, s, 0.0, 1.0]).unwrap();
        // sims: (0,0)=s (0,1)=0 (1,0)=s (1,1)=1
        let expect = (pairwise_sigmoid_loss(s, 1.0, T0, -10.0)
            + pairwise_sigmoid_loss(0.0, -1.0, T0, -10.0)
            + pairwise_sigmoid_loss(s, -1.0, T0, -10.0)
            + pairwise_sigmoid_loss(1.0, 1.0, T0, -10.0))
            / 4.0;
        for dev in [1, 2] {
            let got = chunked(&x, &y, T0, -10.0, dev).unwrap();
            assert!((got - expect).abs() <= 1e-15 * expect);
        }
    }

    #[test]
    fn single_pair_and_orthogonal_negatives() {
        let u = unit_rows(1, 4, 1);
        let got = chunked(&u, &u, T0, -10.0, 1).unwrap();
        assert!((got - 4.539_982_670_5e-6).abs() < 1e-9);

        // two orthogonal pairs: off-diagonal terms are log(1 + e^10)
        let x = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let yt = tape.transpose(xv).unwrap();
        let sim = tape.matmul(xv, yt).unwrap();
        assert_eq!(tape.value(sim).data()[1], 0.0);
        assert!((pairwise_sigmoid_loss(0.0, -1.0, T0, -10.0) - 10.000_045_398_899_217).abs() < 1e-12);
    }

    #[test]
    fn chunk_equivalence_grid() {
        for n in [8usize, 16, 32] {
            let x = unit_rows(n, 6, n as u64);
            let y = unit_rows(n, 6, 100 + n as u64);
            let want = oracle(&x, &y, 1.7, -2.5);
            for dev in [1, 2, 4] {
                let got = chunked(&x, &y, 1.7, -2.5, dev).unwrap();
                assert!((got - want).abs() <= 1e-12 * want, "n={n} D={dev}");
            }
        }
    }

    #[test]
    fn indivisible_batch_is_rejected() {
        let x = unit_rows(6, 4, 0);
        assert!(matches!(chunked(&x, &x, T0, -10.0, 4), Err(Error::Precondition(_))));
        let mut tape = Tape::new();
        let a = tape.constant(unit_rows(3, 4, 1)).unwrap();
        let b = tape.constant(unit_rows(2, 4, 2)).unwrap();
        let t = tape.constant(Tensor::scalar(1.0)).unwrap();
        assert!(p2p_loss(&mut tape, a, b, t, t, 1).is_err());
    }

    #[test]
    fn mrl_full_prefix_is_base_loss() {
        let x = unit_rows(8, 8, 3);
        let y = unit_rows(8, 8, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let yv = tape.constant(y).unwrap();
        let t = tape.constant(Tensor::scalar(T0)).unwrap();
        let c = tape.constant(Tensor::scalar(-10.0)).unwrap();
        let base = chunked_pair_loss(&mut tape, xv, yv, t, c, 2).unwrap();
        let cfg = MrlConfig { prefixes: vec![(8, 1.0)], use_projection_heads: false };
        let (m, _) = mrl_loss(&mut tape, xv, yv, &cfg, &[], |tp, a, b| chunked_pair_loss(tp, a, b, t, c, 2)).unwrap();
        assert_eq!(tape.value(m).item(), tape.value(base).item());
    }

    #[test]
    fn mrl_weighted_sum_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(unit_rows(2, 8, 5)).unwrap();
        let cfg = MrlConfig { prefixes: vec![(4, 0.1), (8, 1.0)], use_projection_heads: false };
        let (m, parts) = mrl_loss(&mut tape, x, x, &cfg, &[], |tp, a, _| {
            let k = tp.shape(a)[1] as f64;
            Ok(tp.constant(Tensor::scalar(8.0 / k))?)
        })
        .unwrap();
        assert_eq!(parts.len(), 2);
        assert!((tape.value(m).item() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn mrl_config_validation() {
        let wide = MrlConfig {
            prefixes: vec![(64, 0.1), (128, 0.1), (256, 1.0)],
            use_projection_heads: false,
        };
        assert!(wide.validate(256).is_ok());
        assert!(wide.validate(128).is_err());
        let bad = MrlConfig { prefixes: vec![(8, 1.0), (4, 1.0)], use_projection_heads: false };
        assert!(bad.validate(8).is_err());
        let bad = MrlConfig { prefixes: vec![(4, 0.0), (8, 1.0)], use_projection_heads: false };
        assert!(bad.validate(8).is_err());
        assert_eq!(MrlConfig::default_for(32).prefixes, vec![(8, 0.1), (16, 0.1), (32, 1.0)]);
    }

    #[test]
    fn total_loss_composition() {
        let mut tape = Tape::new();
        let x = tape.constant(unit_rows(4, 4, 6)).unwrap();
        let y = tape.constant(unit_rows(4, 4, 7)).unwrap();
        let t = tape.constant(Tensor::scalar(T0)).unwrap();
        let c = tape.constant(Tensor::scalar(-10.0)).unwrap();
        let inp = PairInputs { x, y, t, c };
        let mut cfg = LossConfig { i2t: true, p2p: false, mrl: None };
        let terms = total_loss(&mut tape, &cfg, Some(inp), Some(inp), &[], 2).unwrap();
        assert_eq!(terms.total, terms.i2t.unwrap());
        assert!(terms.p2p.is_none());

        cfg.p2p = true;
        let terms = total_loss(&mut tape, &cfg, Some(inp), Some(inp), &[], 2).unwrap();
        let (a, b) = (tape.value(terms.i2t.unwrap()).item(), tape.value(terms.p2p.unwrap()).item());
        assert_eq!(tape.value(terms.total).item(), a + b);

        cfg.i2t = false;
        cfg.p2p = false;
        assert!(matches!(
            total_loss(&mut tape, &cfg, Some(inp), None, &[], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn total_loss_sums_component_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.4)).unwrap();
        let b = tape.constant(Tensor::scalar(0.7)).unwrap();
        let s = tape.add(a, b).unwrap();
        assert!((tape.value(s).item() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn gradients_wrt_scalars_and_rows() {
        let x = unit_rows(4, 3, 8);
        let y = unit_rows(4, 3, 9);
        let cfg = MrlConfig { prefixes: vec![(2, 0.5), (3, 1.0)], use_projection_heads: true };
        let heads = Tensor::new([2, 2], vec![1.0, 0.2, -0.1, 0.9]).unwrap();
        let heads3 = Tensor::identity(3);
        let r = grad_check(
            |tape, v| {
                let hs = [(2, v[4]), (3, v[5])];
                let (l, _) = mrl_loss(tape, v[0], v[1], &cfg, &hs, |tp, a, b| {
                    chunked_pair_loss(tp, a, b, v[2], v[3], 2)
                })?;
                Ok::<_, Error>(l)
            },
            &[x, y, Tensor::scalar(T0), Tensor::scalar(-1.0), heads, heads3],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn loss_is_chunk_invariant_positive_and_permutation_symmetric(
            seed in 0u64..1000, exp in 1u32..4, t in 0.1f64..5.0, c in -8.0f64..2.0
        ) {
            let n = 1usize << (exp + 1);
            let x = unit_rows(n, 5, seed);
            let y = unit_rows(n, 5, seed + 7);
            let want = oracle(&x, &y, t, c);
            prop_assert!(want >= 0.0);
            for dev in [1usize, 2, 4] {
                let got = chunked(&x, &y, t, c, dev).unwrap();
                prop_assert!((got - want).abs() <= 1e-12 * want);
            }
            // consistent permutation of pins
            let perm: Vec<usize> = (0..n).rev().collect();
            let permute = |m: &Tensor| {
                let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let got = chunked(&permute(&x), &permute(&y), t, c, 2).unwrap();
            prop_assert!((got - want).abs() <= 1e-12 * want);
        }

        #[test]
        fn label_flip_monotonicity(s1 in -1.0f64..1.0, ds in 1e-3f64..0.5, t in 0.1f64..5.0, c in -10.0f64..2.0) {
            let s2 = (s1 + ds).min(1.0);
            prop_assume!(s2 > s1);
            prop_assert!(pairwise_sigmoid_loss(s2, 1.0, t, c) < pairwise_sigmoid_loss(s1, 1.0, t, c));
            prop_assert!(pairwise_sigmoid_loss(s2, -1.0, t, c) > pairwise_sigmoid_loss(s1, -1.0, t, c));
        }
    }
}
