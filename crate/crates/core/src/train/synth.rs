//! Moving-bar clips whose class is the direction of motion.
//!
//! A bar spanning the whole frame moves one pixel per frame: vertical bars
//! travel right or left, horizontal bars down or up. A single frame shows
//! the axis but not the sign. Channel 0 is the bar mask times a brightness
//! that ramps with time; channel 1 is the mask times the bar's signed
//! offset from the frame centre, which lets the translation-invariant
//! backbone relate position to time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use crate::tensor::{Shape5, VideoFeature};

/// Bar thickness in pixels.
pub const BAR: usize = 2;

/// Scale of the clean signal; values on the bar lie in `[-3, 4.5]`.
pub const AMPLITUDE: f64 = 3.0;

/// Per-frame displacement `(dh, dw)` of each class: right, left, down, up.
pub const DIRECTIONS: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    pub classes: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Standard deviation of the additive noise on every value.
    pub noise: f64,
}

impl SynthTask {
    pub fn default_with_seed(seed: u64) -> Self {
        SynthTask {
            classes: 4,
            t: 8,
            h: 16,
            w: 16,
            c_in: 2,
            seed,
            train_size: 512,
            val_size: 128,
            noise: 0.05,
        }
    }

    pub fn clip_shape(&self) -> Shape5 {
        Shape5::new(1, self.t, self.h, self.w, self.c_in).expect("validated dims")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > DIRECTIONS.len() {
            return Err(PnlError::config(format!("classes must be in 1..=4, got {}", self.classes)));
        }
        if self.c_in != 2 {
            return Err(PnlError::config(format!("clips have 2 channels, got c_in={}", self.c_in)));
        }
        let span = BAR + self.t.saturating_sub(1);
        if self.t < 2 || self.h < span || self.w < span || self.h < 2 || self.w < 2 {
            return Err(PnlError::config(format!(
                "a {BAR}-pixel bar moving for {} frames does not fit in {}x{}",
                self.t, self.h, self.w
            )));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(PnlError::config("noise must be nonnegative"));
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
        }
    }
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Val => 2,
    });
    rng.set_word_pos(index as u128 * (1 << 20));
    rng
}

/// Leading edge of the bar in frame 0 along its axis of motion, and the
/// per-frame step along that axis.
fn start_offset<R: Rng>(rng: &mut R, len: usize, step: isize, t: usize) -> usize {
    let room = len - BAR;
    let travel = t - 1;
    if step > 0 {
        rng.gen_range(0..=room - travel)
    } else {
        rng.gen_range(travel..=room)
    }
}

/// Deterministic clip `(1,T,H,W,2)` and label for `(seed, split, index)`.
pub fn gen_synth(task: &SynthTask, split: Split, index: usize) -> Result<(VideoFeature, usize)> {
    task.validate()?;
    let label = index % task.classes;
    let (dh, dw) = DIRECTIONS[label];
    let vertical_motion = dh != 0;
    let (len, step) = if vertical_motion { (task.h, dh) } else { (task.w, dw) };
    let mut rng = sample_rng(task.seed, split, index);
    let first = start_offset(&mut rng, len, step, task.t);
    let t_len = task.t;
    let clip = VideoFeature::from_fn(task.clip_shape(), |_, t, h, w, c| {
        let lead = (first as isize + step * t as isize) as usize;
        let along = if vertical_motion { h } else { w };
        let base = if (lead..lead + BAR).contains(&along) {
            match c {
                0 => 0.5 + t as f64 / (t_len - 1) as f64,
                _ => 2.0 * along as f64 / (len - 1) as f64 - 1.0,
            }
        } else {
            0.0
        };
        // three uniforms on [-1, 1) sum to unit variance
        let noise: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum();
        AMPLITUDE * base + task.noise * noise
    });
    Ok((clip, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_dependent() {
        let task = SynthTask::default_with_seed(0);
        let (a, la) = gen_synth(&task, Split::Train, 17).unwrap();
        let (b, lb) = gen_synth(&task, Split::Train, 17).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(la, lb);
        let (c, _) = gen_synth(&SynthTask::default_with_seed(1), Split::Train, 17).unwrap();
        assert!(!a.bitwise_eq(&c));
        let (d, _) = gen_synth(&task, Split::Val, 17).unwrap();
        assert!(!a.bitwise_eq(&d));
        assert!(a.is_finite());
    }

    #[test]
    fn labels_cover_classes() {
        let task = SynthTask::default_with_seed(3);
        for i in 0..8 {
            assert_eq!(gen_synth(&task, Split::Val, i).unwrap().1, i % 4);
        }
    }

    #[test]
    fn mean_displacement_per_class() {
        let task = SynthTask::default_with_seed(2);
        let mut total = [(0.0f64, 0.0f64); 4];
        let mut count = [0usize; 4];
        for i in 0..100 {
            let (clip, label) = gen_synth(&task, Split::Train, i).unwrap();
            let centroid = |t: usize| {
                let (mut sh, mut sw, mut m) = (0.0, 0.0, 0.0);
                for h in 0..task.h {
                    for w in 0..task.w {
                        if clip.get(0, t, h, w, 0) > 1.0 {
                            sh += h as f64;
                            sw += w as f64;
                            m += 1.0;
                        }
                    }
                }
                (sh / m, sw / m)
            };
            let (a, b) = (centroid(0), centroid(task.t - 1));
            let steps = (task.t - 1) as f64;
            total[label].0 += (b.0 - a.0) / steps;
            total[label].1 += (b.1 - a.1) / steps;
            count[label] += 1;
        }
        for (k, &(dh, dw)) in DIRECTIONS.iter().enumerate() {
            let (mh, mw) = (total[k].0 / count[k] as f64, total[k].1 / count[k] as f64);
            assert!((mh - dh as f64).abs() < 1e-9 && (mw - dw as f64).abs() < 1e-9, "class {k}: {mh},{mw}");
        }
    }

    #[test]
    fn rejects_bad_tasks() {
        let mut task = SynthTask::default_with_seed(0);
        task.h = 8;
        assert!(task.validate().is_err());
        let mut task = SynthTask::default_with_seed(0);
        task.classes = 5;
        assert!(gen_synth(&task, Split::Train, 0).is_err());
    }
}
