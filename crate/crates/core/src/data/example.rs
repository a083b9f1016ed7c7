use super::clip::VideoClip;
use super::poke::PokeSpec;
use crate::error::{Error, Result};
use crate::image::Image;

/// `(x0, poke, targets)` triple consumed by the trainer.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub x0: Image,
    pub poke: PokeSpec,
    pub targets: Vec<Image>,
    /// Background examples target a still sequence: `x0` repeated.
    pub is_background: bool,
}

impl TrainingExample {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Foreground examples take the `len` frames following `start`; background
/// examples repeat `x0 = frames[start]`.
pub fn make_training_example(
    clip: &VideoClip,
    start: usize,
    len: usize,
    poke: PokeSpec,
    is_background: bool,
) -> Result<TrainingExample> {
    if len == 0 {
        return Err(Error::validation("training sequences need at least one target frame"));
    }
    if start >= clip.len() || (!is_background && start + len >= clip.len()) {
        return Err(Error::validation(format!(
            "window start {start} + {len} frames exceeds clip `{}` of {} frames",
            clip.clip_id,
            clip.len()
        )));
    }
    let x0 = clip.frame(start).clone();
    poke.validate(x0.height(), x0.width())?;
    let targets = if is_background {
        vec![x0.clone(); len]
    } else {
        clip.frames()[start + 1..=start + len].to_vec()
    };
    Ok(TrainingExample {
        x0,
        poke,
        targets,
        is_background,
    })
}
