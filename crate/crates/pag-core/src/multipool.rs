//! Per-pixel selection among parallel dilated-convolution pooling branches.
//!
//! Hard mode routes each pixel through exactly one branch via the
//! straight-through gate and evaluates every branch perforated on its own
//! selected-pixel set, so the combined conv cost stays near one dense branch.
//! Soft mode is the weighted-average baseline: every branch runs densely and
//! the output mixes them with per-pixel softmax weights. The selector is
//! trained by task gradients alone; no sparsity penalty attaches here.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::gating::{gumbel_sample, GateMask};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Default dilation ladder; rate 0 is the copy branch.
pub const DEFAULT_RATES: [usize; 7] = [0, 1, 2, 4, 6, 8, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Hard,
    Soft,
}

/// Branch kernels plus the 1x1 selector head. The rate-0 branch carries no
/// kernel; it copies the input feature map.
#[derive(Clone, Debug)]
pub struct PoolBranchSet {
    pub rates: Vec<usize>,
    pub branches: Vec<Option<(Tensor, Tensor)>>,
    pub selector_kernel: Tensor,
    pub selector_bias: Tensor,
}

impl PoolBranchSet {
    pub fn random<R: Rng>(channels: usize, rates: &[usize], rng: &mut R) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidArg("multipool needs at least one rate".into()));
        }
        for w in rates.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidArg(format!(
                    "dilation rates must be strictly increasing, got {rates:?}"
                )));
            }
        }
        let fan_in = (channels * 9) as f64;
        let bound = (2.0 / fan_in).sqrt();
        let branches = rates
            .iter()
            .map(|&rate| {
                (rate > 0).then(|| {
                    let kernel = Tensor::from_fn(&[channels, channels, 3, 3], |_| {
                        rng.gen_range(-bound..bound)
                    })
                    .expect("finite init");
                    (kernel, Tensor::zeros(&[channels]))
                })
            })
            .collect();
        let p = rates.len();
        let sel_bound = (2.0 / channels as f64).sqrt();
        let selector_kernel =
            Tensor::from_fn(&[p, channels, 1, 1], |_| rng.gen_range(-sel_bound..sel_bound))
                .expect("finite init");
        Ok(PoolBranchSet {
            rates: rates.to_vec(),
            branches,
            selector_kernel,
            selector_bias: Tensor::zeros(&[p]),
        })
    }

    pub fn branch_count(&self) -> usize {
        self.rates.len()
    }

    pub fn channels(&self) -> usize {
        self.selector_kernel.dims()[1]
    }

    fn branch_spec(&self, rate: usize) -> ConvSpec {
        let c = self.channels();
        ConvSpec::new(c, c, 3, 3, rate)
    }

    fn selector_spec(&self) -> ConvSpec {
        ConvSpec::new(self.branch_count(), self.channels(), 1, 1, 1)
    }
}

#[derive(Clone, Debug)]
pub struct PoolBranchIds {
    pub branches: Vec<Option<(NodeId, NodeId)>>,
    pub selector_kernel: NodeId,
    pub selector_bias: NodeId,
}

pub fn register_branch_set(tape: &mut Tape, p: &PoolBranchSet) -> PoolBranchIds {
    PoolBranchIds {
        branches: p
            .branches
            .iter()
            .map(|b| {
                b.as_ref()
                    .map(|(k, bias)| (tape.leaf(k.clone()), tape.leaf(bias.clone())))
            })
            .collect(),
        selector_kernel: tape.leaf(p.selector_kernel.clone()),
        selector_bias: tape.leaf(p.selector_bias.clone()),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiPoolOut {
    pub output: NodeId,
    /// (P, H, W): one-hot in hard mode, simplex-valued in soft mode.
    pub selection: NodeId,
}

/// Route the feature map through the pooling branches.
pub fn multipool<R: Rng>(
    tape: &mut Tape,
    x: NodeId,
    p: &PoolBranchSet,
    ids: &PoolBranchIds,
    mode: PoolMode,
    tau: Option<f64>,
    rng: Option<&mut R>,
) -> Result<MultiPoolOut> {
    let dims = tape.value(x).dims().to_vec();
    if dims.len() != 3 || dims[0] != p.channels() {
        return Err(Error::DimMismatch(format!(
            "multipool input {:?} vs {} channels",
            dims,
            p.channels()
        )));
    }
    let logits_conv = tape.conv2d(x, ids.selector_kernel, &p.selector_spec())?;
    let logits = tape.add_bias(logits_conv, ids.selector_bias)?;

    let selection = match mode {
        PoolMode::Hard => {
            let tau = tau.ok_or_else(|| {
                Error::InvalidArg("hard multipool requires a temperature".into())
            })?;
            if p.branch_count() == 1 {
                // Degenerate set: everything routes through the one branch.
                tape.leaf(Tensor::full(&[1, dims[1], dims[2]], 1.0)?)
            } else {
                let gumbels = match rng {
                    Some(r) => gumbel_sample(tape.value(logits).dims(), r),
                    None => Tensor::zeros(tape.value(logits).dims()),
                };
                tape.straight_through_gate(logits, gumbels, tau)?
            }
        }
        PoolMode::Soft => tape.softmax_channels(logits)?,
    };

    let mut acc: Option<NodeId> = None;
    for (i, rate) in p.rates.iter().copied().enumerate() {
        let weight = tape.channel(selection, i)?;
        let contribution = if rate == 0 {
            // Copy branch: the input feature passes straight through.
            tape.mul_spatial(x, weight)?
        } else {
            let (kernel, bias) = ids.branches[i]
                .ok_or_else(|| Error::InvalidArg(format!("branch {i} missing kernel")))?;
            let spec = p.branch_spec(rate);
            let conv = match mode {
                PoolMode::Hard => tape.conv2d_perforated(x, kernel, weight, &spec)?,
                PoolMode::Soft => tape.conv2d(x, kernel, &spec)?,
            };
            let biased = tape.add_bias(conv, bias)?;
            tape.mul_spatial(biased, weight)?
        };
        acc = Some(match acc {
            Some(prev) => tape.add(prev, contribution)?,
            None => contribution,
        });
    }
    Ok(MultiPoolOut {
        output: acc.expect("at least one branch"),
        selection,
    })
}

/// Host-side view of a hard selection: one-hot across P branches per pixel.
#[derive(Clone, Debug)]
pub struct SelectionMask {
    values: Tensor,
}

impl SelectionMask {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::DimMismatch(format!(
                "selection mask must be PxHxW, got {:?}",
                values.dims()
            )));
        }
        if !values.is_binary() {
            return Err(Error::NonBinaryMask("selection mask".into()));
        }
        let (k, h, w) = (values.dims()[0], values.dims()[1], values.dims()[2]);
        for y in 0..h {
            for x in 0..w {
                let total: f64 = (0..k).map(|c| values.get3(c, y, x)).sum();
                if total != 1.0 {
                    return Err(Error::NonBinaryMask(format!(
                        "selection at ({y}, {x}) activates {total} branches"
                    )));
                }
            }
        }
        Ok(SelectionMask { values })
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn branch_count(&self) -> usize {
        self.values.dims()[0]
    }

    /// Binary mask of the pixels routed to branch `i`.
    pub fn branch_mask(&self, i: usize) -> Result<GateMask> {
        let (h, w) = (self.values.dims()[1], self.values.dims()[2]);
        let t = Tensor::from_fn(&[h, w], |px| self.values.get3(i, px / w, px % w))?;
        GateMask::from_tensor(t)
    }

    /// Index of the selected branch per pixel.
    pub fn index_map(&self) -> Vec<u8> {
        let (k, h, w) = (
            self.values.dims()[0],
            self.values.dims()[1],
            self.values.dims()[2],
        );
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut idx = 0u8;
                for c in 0..k {
                    if self.values.get3(c, y, x) == 1.0 {
                        idx = c as u8;
                        break;
                    }
                }
                out.push(idx);
            }
        }
        out
    }

    /// PGM pixels with value = selected index scaled by floor(255 / (P - 1)).
    pub fn to_pgm_pixels(&self) -> Vec<u8> {
        let p = self.branch_count();
        let scale = if p > 1 { (255 / (p - 1)) as u8 } else { 255 };
        self.index_map().iter().map(|&i| i.saturating_mul(scale)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rejects_non_increasing_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        assert!(PoolBranchSet::random(4, &[0, 2, 2], &mut rng).is_err());
        assert!(PoolBranchSet::random(4, &[1, 0], &mut rng).is_err());
    }

    #[test]
    fn single_branch_selects_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = PoolBranchSet::random(3, &[1], &mut rng).unwrap();
        let x_t = rand_tensor(&[3, 5, 5], &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone());
        let ids = register_branch_set(&mut tape, &p);
        let out = multipool::<ChaCha8Rng>(&mut tape, x, &p, &ids, PoolMode::Hard, Some(0.5), None)
            .unwrap();
        assert!(tape.value(out.selection).data().iter().all(|&v| v == 1.0));

        // Equals the plain branch conv plus bias.
        let (k, b) = p.branches[0].as_ref().unwrap();
        let mut ref_tape = Tape::new();
        let rx = ref_tape.leaf(x_t);
        let rk = ref_tape.leaf(k.clone());
        let rb = ref_tape.leaf(b.clone());
        let conv = ref_tape
            .conv2d(rx, rk, &ConvSpec::new(3, 3, 3, 3, 1))
            .unwrap();
        let want = ref_tape.add_bias(conv, rb).unwrap();
        assert!(
            tape.value(out.output)
                .max_abs_diff(ref_tape.value(want))
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn hard_selection_matches_dense_then_select_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let rates = [0usize, 1, 2, 4];
        let p = PoolBranchSet::random(3, &rates, &mut rng).unwrap();
        let x_t = rand_tensor(&[3, 8, 8], &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone());
        let ids = register_branch_set(&mut tape, &p);
        let out = multipool(
            &mut tape,
            x,
            &p,
            &ids,
            PoolMode::Hard,
            Some(0.7),
            Some(&mut rng),
        )
        .unwrap();
        let sel = tape.value(out.selection).clone();
        let got = tape.value(out.output).clone();

        // Oracle: evaluate every branch densely, then pick per pixel.
        let mut branch_outputs = Vec::new();
        for (i, &rate) in rates.iter().enumerate() {
            if rate == 0 {
                branch_outputs.push(x_t.clone());
            } else {
                let (k, b) = p.branches[i].as_ref().unwrap();
                let mut t = Tape::new();
                let xi = t.leaf(x_t.clone());
                let ki = t.leaf(k.clone());
                let bi = t.leaf(b.clone());
                let conv = t.conv2d(xi, ki, &p.branch_spec(rate)).unwrap();
                let biased = t.add_bias(conv, bi).unwrap();
                branch_outputs.push(t.value(biased).clone());
            }
        }
        for y in 0..8 {
            for x in 0..8 {
                let chosen = (0..rates.len())
                    .find(|&i| sel.get3(i, y, x) == 1.0)
                    .expect("one-hot");
                for c in 0..3 {
                    let want = branch_outputs[chosen].get3(c, y, x);
                    assert!((got.get3(c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rate_zero_pixels_reproduce_input_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = PoolBranchSet::random(2, &[0, 1], &mut rng).unwrap();
        let x_t = rand_tensor(&[2, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone());
        let ids = register_branch_set(&mut tape, &p);
        let out = multipool(
            &mut tape,
            x,
            &p,
            &ids,
            PoolMode::Hard,
            Some(0.5),
            Some(&mut rng),
        )
        .unwrap();
        let sel = tape.value(out.selection).clone();
        let got = tape.value(out.output).clone();
        let mut saw_copy = false;
        for y in 0..6 {
            for xx in 0..6 {
                if sel.get3(0, y, xx) == 1.0 {
                    saw_copy = true;
                    for c in 0..2 {
                        assert_eq!(got.get3(c, y, xx), x_t.get3(c, y, xx));
                    }
                }
            }
        }
        assert!(saw_copy, "expected at least one rate-0 pixel in this draw");
    }

    #[test]
    fn hard_mode_requires_tau_and_selection_partitions_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = PoolBranchSet::random(2, &[0, 1, 2], &mut rng).unwrap();
        let x_t = rand_tensor(&[2, 5, 5], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let ids = register_branch_set(&mut tape, &p);
        assert!(multipool::<ChaCha8Rng>(&mut tape, x, &p, &ids, PoolMode::Hard, None, None).is_err());

        let out = multipool(&mut tape, x, &p, &ids, PoolMode::Hard, Some(0.5), Some(&mut rng))
            .unwrap();
        let sel = SelectionMask::from_tensor(tape.value(out.selection).clone()).unwrap();
        let total: usize = (0..sel.branch_count())
            .map(|i| sel.branch_mask(i).unwrap().active_count())
            .sum();
        assert_eq!(total, 25);
    }

    #[test]
    fn soft_weights_lie_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let p = PoolBranchSet::random(3, &[0, 1, 2, 4], &mut rng).unwrap();
        let x_t = rand_tensor(&[3, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let ids = register_branch_set(&mut tape, &p);
        let out = multipool::<ChaCha8Rng>(&mut tape, x, &p, &ids, PoolMode::Soft, None, None)
            .unwrap();
        let sel = tape.value(out.selection);
        for y in 0..6 {
            for xx in 0..6 {
                let mut total = 0.0;
                for c in 0..4 {
                    let v = sel.get3(c, y, xx);
                    assert!(v >= 0.0);
                    total += v;
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_equals_soft_when_selector_is_saturated() {
        // With a hugely biased selector both modes route everything through
        // one branch and must agree.
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut p = PoolBranchSet::random(2, &[0, 1, 2], &mut rng).unwrap();
        p.selector_kernel = Tensor::zeros(p.selector_kernel.dims());
        p.selector_bias = Tensor::new(vec![3], vec![-50.0, 50.0, -50.0]).unwrap();
        let x_t = rand_tensor(&[2, 5, 5], &mut rng);

        let run = |mode: PoolMode, tau: Option<f64>| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let ids = register_branch_set(&mut tape, &p);
            let out = multipool::<ChaCha8Rng>(&mut tape, x, &p, &ids, mode, tau, None).unwrap();
            tape.value(out.output).clone()
        };
        let hard = run(PoolMode::Hard, Some(0.5));
        let soft = run(PoolMode::Soft, None);
        assert!(hard.max_abs_diff(&soft).unwrap() < 1e-12);
    }
}
