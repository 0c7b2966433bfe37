//! Exact-count mask plans over patch tokens.
//!
//! Plans index patch tokens only. A class token, when present, sits in front
//! of the patch rows and is always visible.

use rand::seq::{IndexedRandom, IteratorRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::rng;
use crate::tokenizer::{Grid, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskStrategy {
    Random,
    /// Whole time slots and whole frequency bands of a spectrogram grid.
    TimeFreq,
    /// Whole frames and whole spatial tubes of a video grid.
    SpaceTime,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "random" => Ok(MaskStrategy::Random),
            "timefreq" => Ok(MaskStrategy::TimeFreq),
            "spacetime" => Ok(MaskStrategy::SpaceTime),
            _ => Err(Error::Config(format!("unknown mask strategy {s:?}"))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::Random => "random",
            MaskStrategy::TimeFreq => "timefreq",
            MaskStrategy::SpaceTime => "spacetime",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub strategy: MaskStrategy,
    pub seed: u64,
}

/// `ceil(ratio * len)`, robust to products that land a hair above an integer.
pub fn masked_count(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64) - 1e-9).ceil().max(0.0) as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Picks how many whole time slots and whole inner-axis lines to mask.
///
/// Unions that land within `2%` of the target count are preferred; among
/// those the inner-axis fraction closest to twice the time fraction wins.
fn structured_counts(time: usize, inner: usize, n_mask: usize) -> (usize, usize) {
    let len = time * inner;
    let slack = (0.02 * len as f64).floor() as usize;
    let mut cands = Vec::new();
    for kt in 0..=time {
        for ks in 0..=inner {
            let union = kt * inner + ks * time - kt * ks;
            if union <= n_mask {
                cands.push((kt, ks, n_mask - union));
            }
        }
    }
    let best_topup = cands.iter().map(|c| c.2).min().unwrap_or(0);
    let limit = slack.max(best_topup);
    let score = |&(kt, ks, _): &(usize, usize, usize)| (ks as f64 / inner as f64 - 2.0 * kt as f64 / time as f64).abs();
    cands
        .into_iter()
        .filter(|c| c.2 <= limit)
        .min_by(|a, b| score(a).total_cmp(&score(b)).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)))
        .map(|(kt, ks, _)| (kt, ks))
        .unwrap_or((0, 0))
}

/// Builds a plan that is a pure function of `(grid, ratio, strategy, seed)`.
pub fn make_mask(grid: Grid, ratio: f64, strategy: MaskStrategy, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let len = grid.len();
    let n_mask = masked_count(len, ratio);
    let mut rng = rng::stream(seed, &[rng::domain::MASK]);
    let mut is_masked = vec![false; len];
    match strategy {
        MaskStrategy::Random => {
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut rng);
            perm[..n_mask].iter().for_each(|&i| is_masked[i] = true);
        }
        MaskStrategy::TimeFreq | MaskStrategy::SpaceTime => {
            let (time, inner) = grid.time_and_rest();
            let (kt, ks) = structured_counts(time, inner, n_mask);
            for t in (0..time).choose_multiple(&mut rng, kt) {
                (0..inner).for_each(|s| is_masked[t * inner + s] = true);
            }
            for s in (0..inner).choose_multiple(&mut rng, ks) {
                (0..time).for_each(|t| is_masked[t * inner + s] = true);
            }
            let done = is_masked.iter().filter(|&&m| m).count();
            let free: Vec<usize> = (0..len).filter(|&i| !is_masked[i]).collect();
            for i in free.choose_multiple(&mut rng, n_mask - done) {
                is_masked[*i] = true;
            }
        }
    }
    let (masked, kept): (Vec<usize>, Vec<usize>) = (0..len).partition(|&i| is_masked[i]);
    Ok(MaskPlan {
        kept,
        masked,
        ratio,
        strategy,
        seed,
    })
}

impl MaskPlan {
    /// Plan that keeps every token.
    pub fn keep_all(len: usize) -> Self {
        MaskPlan {
            kept: (0..len).collect(),
            masked: Vec::new(),
            ratio: 0.0,
            strategy: MaskStrategy::Random,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row indices to gather from a full sequence, class token first when present.
    pub fn visible_rows(&self, has_cls: bool) -> Vec<usize> {
        let off = usize::from(has_cls);
        (0..off).chain(self.kept.iter().map(|&i| i + off)).collect()
    }

    /// For each full position, the row of `[visible ; mask_token]` that fills it.
    pub fn restore_index(&self, has_cls: bool) -> Vec<usize> {
        let off = usize::from(has_cls);
        let mask_row = self.kept.len() + off;
        let mut idx = vec![mask_row; self.len() + off];
        if has_cls {
            idx[0] = 0;
        }
        for (j, &i) in self.kept.iter().enumerate() {
            idx[i + off] = j + off;
        }
        idx
    }
}

pub fn apply_mask(seq: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    let patches = seq.len() - usize::from(seq.has_cls);
    if patches != plan.len() {
        return Err(Error::shape(
            "apply_mask",
            format!("plan covers {} tokens, sequence has {patches}", plan.len()),
        ));
    }
    Ok(TokenSequence {
        tokens: seq.tokens.gather_rows(&plan.visible_rows(seq.has_cls))?,
        grid: seq.grid,
        has_cls: seq.has_cls,
        modality: seq.modality,
    })
}

/// Differentiable gather of the visible rows.
pub fn apply_mask_var(tape: &Tape, tokens: Var, plan: &MaskPlan, has_cls: bool) -> Result<Var> {
    let rows = tape.shape(tokens)[0];
    if rows != plan.len() + usize::from(has_cls) {
        return Err(Error::shape(
            "apply_mask",
            format!("plan covers {} tokens, sequence has {rows} rows", plan.len()),
        ));
    }
    tape.gather_rows(tokens, &plan.visible_rows(has_cls))
}

/// Scatters visible outputs back to their grid positions; masked positions
/// receive `mask_token` (a `1 x width` row).
pub fn restore_order(tape: &Tape, visible: Var, plan: &MaskPlan, mask_token: Var, has_cls: bool) -> Result<Var> {
    let rows = tape.shape(visible)[0];
    if rows != plan.kept.len() + usize::from(has_cls) {
        return Err(Error::shape(
            "restore_order",
            format!("{rows} visible rows for {} kept tokens", plan.kept.len()),
        ));
    }
    let stacked = tape.concat_rows(&[visible, mask_token])?;
    tape.gather_rows(stacked, &plan.restore_index(has_cls))
}

/// Independent second masking of the same sequence.
pub fn second_view(
    seq: &TokenSequence,
    ratio: f64,
    strategy: MaskStrategy,
    seed: u64,
) -> Result<(MaskPlan, TokenSequence)> {
    let plan = make_mask(seq.grid, ratio, strategy, rng::derive(seed, &[rng::domain::SECOND_VIEW]))?;
    let visible = apply_mask(seq, &plan)?;
    Ok((plan, visible))
}
