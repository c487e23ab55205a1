//! Looped multi-view frame sequences.
//!
//! An orbit of `n` renders becomes a looping video by repeating the first
//! frame at the end; with 16 views this gives the 17 = 4·4 + 1 frames the
//! denoiser expects. An optional reference image can be placed in front with
//! an all-zero mask and removed again after generation.

use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geometry::{GaussianCloud, Mask3D};
use crate::par;
use crate::render::{render, render_mask, Image, MaskImage, RenderSettings};

/// Value written into masked pixels before the frames reach the denoiser.
pub const MASK_FILL: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub masks: Vec<MaskImage>,
    /// `None` marks the reference slot.
    pub poses: Vec<Option<CameraPose>>,
    pub loop_closed: bool,
    pub reference_attached: bool,
    pub label: usize,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the first orbital frame.
    pub fn loop_start(&self) -> usize {
        usize::from(self.reference_attached)
    }

    /// Number of frames excluding the reference slot.
    pub fn orbital_len(&self) -> usize {
        self.len() - self.loop_start()
    }

    /// Whether the orbital part has `4n + 1` frames.
    pub fn satisfies_length_policy(&self) -> bool {
        self.orbital_len() % 4 == 1
    }

    /// True when no pixel of any frame is masked, i.e. inpainting is a no-op.
    pub fn is_noop(&self) -> bool {
        self.masks.iter().all(MaskImage::is_all_zero)
    }

    pub fn dimensions(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width, f.height))
    }

    /// Checks the structural invariants; `length_policy` additionally
    /// requires `4n + 1` orbital frames.
    pub fn validate(&self, length_policy: bool) -> Result<()> {
        if self.frames.len() != self.masks.len() || self.frames.len() != self.poses.len() {
            return Err(Error::State("frames, masks and poses differ in length".into()));
        }
        if let Some((w, h)) = self.dimensions() {
            let ok = self.frames.iter().all(|f| f.width == w && f.height == h)
                && self.masks.iter().all(|m| m.width == w && m.height == h);
            if !ok {
                return Err(Error::State("frames and masks must share one size".into()));
            }
        }
        if self.reference_attached {
            if self.masks.first().is_none_or(|m| !m.is_all_zero()) {
                return Err(Error::State("reference frame must carry an all-zero mask".into()));
            }
            if self.poses[0].is_some() {
                return Err(Error::State("reference frame must not carry a pose".into()));
            }
        }
        if self.loop_closed {
            let start = self.loop_start();
            let last = self.len() - 1;
            if last <= start
                || self.frames[last] != self.frames[start]
                || self.masks[last] != self.masks[start]
                || self.poses[last] != self.poses[start]
            {
                return Err(Error::State("loop-closing frame differs from the loop start".into()));
            }
        }
        if length_policy && !self.satisfies_length_policy() {
            return Err(Error::State(format!("{} orbital frames is not of the form 4n+1", self.orbital_len())));
        }
        Ok(())
    }

    /// Frames with masked pixels replaced by [`MASK_FILL`].
    pub fn filled_frames(&self) -> Vec<Image> {
        self.frames
            .iter()
            .zip(&self.masks)
            .map(|(f, m)| {
                let mut out = f.clone();
                for (px, mv) in out.pixels.chunks_exact_mut(3).zip(&m.values) {
                    if *mv != 0.0 {
                        px.fill(MASK_FILL);
                    }
                }
                out
            })
            .collect()
    }
}

/// Renders the carved object and its mask from every rig pose, plus the full
/// object as ground truth. No loop closure is applied.
pub fn render_sequence(
    full: &GaussianCloud,
    carved: &GaussianCloud,
    mask: &Mask3D,
    rig: &[CameraPose],
    settings: &RenderSettings,
    label: usize,
) -> Result<(FrameSequence, Vec<Image>)> {
    if rig.is_empty() {
        return Err(Error::param("rig has no cameras"));
    }
    let views = par::map(rig.len(), |i| {
        let pose = &rig[i];
        (render(carved, pose, settings), render_mask(mask, pose), render(full, pose, settings))
    });
    let mut frames = Vec::with_capacity(rig.len());
    let mut masks = Vec::with_capacity(rig.len());
    let mut targets = Vec::with_capacity(rig.len());
    for (f, m, t) in views {
        frames.push(f);
        masks.push(m);
        targets.push(t);
    }
    let seq = FrameSequence {
        frames,
        masks,
        poses: rig.iter().copied().map(Some).collect(),
        loop_closed: false,
        reference_attached: false,
        label,
    };
    Ok((seq, targets))
}

/// Appends a bit-exact copy of the loop-start frame, mask and pose.
pub fn close_loop(seq: &FrameSequence) -> Result<FrameSequence> {
    if seq.loop_closed {
        return Err(Error::State("sequence is already loop-closed".into()));
    }
    let start = seq.loop_start();
    if seq.len() <= start {
        return Err(Error::State("no orbital frames to close".into()));
    }
    let mut out = seq.clone();
    out.frames.push(seq.frames[start].clone());
    out.masks.push(seq.masks[start].clone());
    out.poses.push(seq.poses[start]);
    out.loop_closed = true;
    Ok(out)
}

/// Removes the loop-closing frame added by [`close_loop`].
pub fn open_loop(seq: &FrameSequence) -> Result<FrameSequence> {
    if !seq.loop_closed {
        return Err(Error::State("sequence is not loop-closed".into()));
    }
    let mut out = seq.clone();
    out.frames.pop();
    out.masks.pop();
    out.poses.pop();
    out.loop_closed = false;
    Ok(out)
}

/// Same as [`close_loop`] for a plain list (e.g. ground-truth targets).
pub fn close_loop_images(images: &[Image]) -> Vec<Image> {
    let mut out = images.to_vec();
    if let Some(first) = images.first() {
        out.push(first.clone());
    }
    out
}

/// Prepends `reference` with an all-zero mask and an empty pose slot.
pub fn attach_reference(seq: &FrameSequence, reference: &Image) -> Result<FrameSequence> {
    if seq.reference_attached {
        return Err(Error::State("a reference frame is already attached".into()));
    }
    if let Some((w, h)) = seq.dimensions() {
        if reference.width != w || reference.height != h {
            return Err(Error::param(format!(
                "reference is {}x{}, frames are {w}x{h}",
                reference.width, reference.height
            )));
        }
    }
    let mut out = seq.clone();
    out.frames.insert(0, reference.clone());
    out.masks.insert(0, MaskImage::zeros(reference.width, reference.height));
    out.poses.insert(0, None);
    out.reference_attached = true;
    Ok(out)
}

pub fn detach_reference(seq: &FrameSequence) -> Result<FrameSequence> {
    if !seq.reference_attached {
        return Err(Error::State("no reference frame attached".into()));
    }
    let mut out = seq.clone();
    out.frames.remove(0);
    out.masks.remove(0);
    out.poses.remove(0);
    out.reference_attached = false;
    Ok(out)
}

/// `mask ⊙ generated + (1 − mask) ⊙ input`, frame by frame. Unmasked pixels
/// are copied bit-exactly from the input.
pub fn composite_known(generated: &[Image], seq: &FrameSequence) -> Result<Vec<Image>> {
    if generated.len() != seq.len() {
        return Err(Error::param(format!("{} generated frames for a {}-frame sequence", generated.len(), seq.len())));
    }
    generated
        .iter()
        .zip(seq.frames.iter().zip(&seq.masks))
        .map(|(g, (f, m))| {
            if !g.same_shape(f) {
                return Err(Error::param("generated frame size differs from the input"));
            }
            let mut out = f.clone();
            for ((o, gp), mv) in out.pixels.chunks_exact_mut(3).zip(g.pixels.chunks_exact(3)).zip(&m.values) {
                if *mv != 0.0 {
                    o.copy_from_slice(gp);
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    fn toy(n: usize) -> FrameSequence {
        let frames = (0..n).map(|i| Image::filled(8, 8, Vec3::new(i as f64 / n as f64, 0.2, 0.3))).collect();
        let masks = (0..n)
            .map(|i| {
                let mut m = MaskImage::zeros(8, 8);
                m.values[i % 64] = 1.0;
                m
            })
            .collect();
        FrameSequence { frames, masks, poses: alloc::vec![None; n], loop_closed: false, reference_attached: false, label: 1 }
    }

    #[test]
    fn close_loop_lengths() {
        let s = close_loop(&toy(16)).unwrap();
        assert_eq!(s.len(), 17);
        assert_eq!(s.frames[16], s.frames[0]);
        assert!(s.satisfies_length_policy());
        s.validate(true).unwrap();
        assert_eq!(close_loop(&toy(8)).unwrap().len(), 9);
        assert!(matches!(close_loop(&s), Err(Error::State(_))));
        assert_eq!(open_loop(&s).unwrap(), toy(16));
    }

    #[test]
    fn reference_round_trip() {
        let closed = close_loop(&toy(16)).unwrap();
        let reference = Image::filled(8, 8, Vec3::new(0.9, 0.9, 0.1));
        let with_ref = attach_reference(&closed, &reference).unwrap();
        assert_eq!(with_ref.len(), 18);
        assert!(with_ref.masks[0].is_all_zero());
        assert_eq!(with_ref.loop_start(), 1);
        with_ref.validate(true).unwrap();
        assert_eq!(detach_reference(&with_ref).unwrap(), closed);
        assert!(matches!(detach_reference(&closed), Err(Error::State(_))));
        assert!(matches!(attach_reference(&with_ref, &reference), Err(Error::State(_))));
        let wrong = Image::filled(9, 8, Vec3::ZERO);
        assert!(matches!(attach_reference(&closed, &wrong), Err(Error::Parameter(_))));
    }

    #[test]
    fn composite_extremes() {
        let seq = toy(3);
        let generated: Vec<Image> = (0..3).map(|_| Image::filled(8, 8, Vec3::new(0.7, 0.7, 0.7))).collect();
        let mut zero = seq.clone();
        zero.masks.iter_mut().for_each(|m| *m = MaskImage::zeros(8, 8));
        assert_eq!(composite_known(&generated, &zero).unwrap(), seq.frames);
        let mut one = seq.clone();
        one.masks.iter_mut().for_each(|m| *m = MaskImage::ones(8, 8));
        assert_eq!(composite_known(&generated, &one).unwrap(), generated);
        assert!(composite_known(&generated[..2], &seq).is_err());
    }

    #[test]
    fn fill_only_touches_masked_pixels() {
        let seq = toy(2);
        let filled = seq.filled_frames();
        for (f, (orig, m)) in filled.iter().zip(seq.frames.iter().zip(&seq.masks)) {
            for (i, mv) in m.values.iter().enumerate() {
                let px = &f.pixels[i * 3..i * 3 + 3];
                if *mv != 0.0 {
                    assert_eq!(px, [MASK_FILL; 3]);
                } else {
                    assert_eq!(px, &orig.pixels[i * 3..i * 3 + 3]);
                }
            }
        }
    }
}
