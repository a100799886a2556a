//! Frame stacks and crop augmentation.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// `S` grayscale frames of `H x W` pixels, stored frame-major (`[S, H, W]`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameStack {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl FrameStack {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if frames == 0 || data.len() != frames * height * width {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} bytes for a {frames}x{height}x{width} stack",
                data.len()
            )));
        }
        Ok(Self { frames, height, width, data })
    }

    /// A stack holding `frames` copies of one frame.
    pub fn repeated(frame: &[u8], frames: usize, height: usize, width: usize) -> Result<Self> {
        if frame.len() != height * width {
            return Err(Error::InvalidArgument(alloc::format!("frame of {} bytes for {height}x{width}", frame.len())));
        }
        Self::new(frames, height, width, frame.repeat(frames))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.data[f * plane..(f + 1) * plane]
    }

    pub fn pixel(&self, f: usize, row: usize, col: usize) -> u8 {
        self.data[(f * self.height + row) * self.width + col]
    }

    /// Drops the oldest frame and appends `frame` as the newest.
    pub fn push_frame(&mut self, frame: &[u8]) -> Result<()> {
        let plane = self.height * self.width;
        if frame.len() != plane {
            return Err(Error::InvalidArgument(alloc::format!("frame of {} bytes, expected {plane}", frame.len())));
        }
        self.data.copy_within(plane.., 0);
        let start = self.data.len() - plane;
        self.data[start..].copy_from_slice(frame);
        Ok(())
    }

    /// One-frame stack holding the oldest frame.
    pub fn first_frame(&self) -> FrameStack {
        FrameStack { frames: 1, height: self.height, width: self.width, data: self.frame(0).to_vec() }
    }
}

/// A realized crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropSpec {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub row: usize,
    pub col: usize,
}

impl CropSpec {
    fn check(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<()> {
        if out_h > in_h || out_w > in_w || out_h == 0 || out_w == 0 {
            return Err(Error::CropTooLarge { in_h, in_w, out_h, out_w });
        }
        Ok(())
    }

    /// Draws an offset uniformly over all feasible positions.
    pub fn random(in_h: usize, in_w: usize, out_h: usize, out_w: usize, rng: &mut Rng) -> Result<Self> {
        Self::check(in_h, in_w, out_h, out_w)?;
        let row = rng.random_range(0..=in_h - out_h);
        let col = rng.random_range(0..=in_w - out_w);
        Ok(Self { in_h, in_w, out_h, out_w, row, col })
    }

    /// Offset `floor((in - out) / 2)` per axis.
    pub fn center(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        Self::check(in_h, in_w, out_h, out_w)?;
        Ok(Self { in_h, in_w, out_h, out_w, row: (in_h - out_h) / 2, col: (in_w - out_w) / 2 })
    }

    /// Number of feasible offsets per axis.
    pub fn positions(&self) -> (usize, usize) {
        (self.in_h - self.out_h + 1, self.in_w - self.out_w + 1)
    }

    /// Applies this window to every frame of `stack`.
    pub fn apply(&self, stack: &FrameStack) -> Result<FrameStack> {
        if stack.height != self.in_h || stack.width != self.in_w {
            return Err(Error::InvalidArgument(alloc::format!(
                "crop expects {}x{} frames, got {}x{}",
                self.in_h,
                self.in_w,
                stack.height,
                stack.width
            )));
        }
        let mut data = Vec::with_capacity(stack.frames * self.out_h * self.out_w);
        for f in 0..stack.frames {
            let frame = stack.frame(f);
            for r in self.row..self.row + self.out_h {
                let start = r * self.in_w + self.col;
                data.extend_from_slice(&frame[start..start + self.out_w]);
            }
        }
        Ok(FrameStack { frames: stack.frames, height: self.out_h, width: self.out_w, data })
    }
}

/// One random window shared by every frame of the stack.
pub fn random_crop_stack(stack: &FrameStack, out_h: usize, out_w: usize, rng: &mut Rng) -> Result<(FrameStack, CropSpec)> {
    let spec = CropSpec::random(stack.height, stack.width, out_h, out_w, rng)?;
    Ok((spec.apply(stack)?, spec))
}

pub fn center_crop_stack(stack: &FrameStack, out_h: usize, out_w: usize) -> Result<FrameStack> {
    CropSpec::center(stack.height, stack.width, out_h, out_w)?.apply(stack)
}

/// Two independent random crops of each observation. Row `i` of `keys` is
/// the positive for row `i` of `queries`; every other key is a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryKeyBatch {
    pub queries: Vec<FrameStack>,
    pub keys: Vec<FrameStack>,
    pub query_crops: Vec<CropSpec>,
    pub key_crops: Vec<CropSpec>,
}

impl QueryKeyBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn num_negatives(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

pub fn make_query_key(batch: &[&FrameStack], out: usize, rng: &mut Rng) -> Result<QueryKeyBatch> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut qk = QueryKeyBatch {
        queries: Vec::with_capacity(batch.len()),
        keys: Vec::with_capacity(batch.len()),
        query_crops: Vec::with_capacity(batch.len()),
        key_crops: Vec::with_capacity(batch.len()),
    };
    for stack in batch {
        let (q, qs) = random_crop_stack(stack, out, out, rng)?;
        let (k, ks) = random_crop_stack(stack, out, out, rng)?;
        qk.queries.push(q);
        qk.keys.push(k);
        qk.query_crops.push(qs);
        qk.key_crops.push(ks);
    }
    Ok(qk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn ramp_stack(frames: usize, side: usize) -> FrameStack {
        let data = (0..frames * side * side).map(|i| (i % 251) as u8).collect();
        FrameStack::new(frames, side, side, data).unwrap()
    }

    #[test]
    fn identity_crop_when_sizes_match() {
        let s = ramp_stack(3, 10);
        let mut rng = stream(1, Stream::Augment);
        for _ in 0..20 {
            let (c, spec) = random_crop_stack(&s, 10, 10, &mut rng).unwrap();
            assert_eq!((spec.row, spec.col), (0, 0));
            assert_eq!(c, s);
        }
        assert_eq!(center_crop_stack(&s, 10, 10).unwrap(), s);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let s = ramp_stack(2, 8);
        let mut rng = stream(1, Stream::Augment);
        assert!(matches!(random_crop_stack(&s, 9, 8, &mut rng), Err(Error::CropTooLarge { .. })));
        assert!(matches!(center_crop_stack(&s, 8, 9), Err(Error::CropTooLarge { .. })));
    }

    #[test]
    fn center_offsets() {
        assert_eq!(CropSpec::center(50, 50, 42, 42).unwrap().row, 4);
        let c = CropSpec::center(100, 100, 84, 84).unwrap();
        assert_eq!((c.row, c.col), (8, 8));
        let c = CropSpec::center(25, 25, 21, 21).unwrap();
        assert_eq!((c.row, c.col), (2, 2));
    }

    #[test]
    fn offsets_stay_in_feasible_range() {
        let s = ramp_stack(3, 50);
        let mut rng = stream(7, Stream::Augment);
        for _ in 0..200 {
            let (_, spec) = random_crop_stack(&s, 42, 42, &mut rng).unwrap();
            assert!(spec.row <= 8 && spec.col <= 8);
        }
    }

    #[test]
    fn push_frame_drops_oldest() {
        let mut s = FrameStack::repeated(&[1, 1, 1, 1], 3, 2, 2).unwrap();
        s.push_frame(&[2, 2, 2, 2]).unwrap();
        s.push_frame(&[3, 3, 3, 3]).unwrap();
        assert_eq!(s.frame(0), &[1, 1, 1, 1]);
        assert_eq!(s.frame(1), &[2, 2, 2, 2]);
        assert_eq!(s.frame(2), &[3, 3, 3, 3]);
        assert!(s.push_frame(&[0; 3]).is_err());
    }

    #[test]
    fn query_key_pairs_count() {
        let stacks: Vec<FrameStack> = (0..5).map(|i| ramp_stack(1 + i % 2, 12)).collect();
        let refs: Vec<&FrameStack> = stacks.iter().collect();
        let mut rng = stream(3, Stream::Augment);
        let qk = make_query_key(&refs, 10, &mut rng).unwrap();
        assert_eq!(qk.len(), 5);
        assert_eq!(qk.num_negatives(), 4);
        let single = make_query_key(&refs[..1], 10, &mut rng).unwrap();
        assert_eq!(single.num_negatives(), 0);
        assert!(make_query_key(&[], 10, &mut rng).is_err());
    }

    #[test]
    fn query_key_reproducible_with_seed() {
        let stacks: Vec<FrameStack> = (0..8).map(|_| ramp_stack(3, 50)).collect();
        let refs: Vec<&FrameStack> = stacks.iter().collect();
        let a = make_query_key(&refs, 42, &mut stream(11, Stream::Augment)).unwrap();
        let b = make_query_key(&refs, 42, &mut stream(11, Stream::Augment)).unwrap();
        assert_eq!(a.query_crops, b.query_crops);
        assert_eq!(a.key_crops, b.key_crops);
    }
}
