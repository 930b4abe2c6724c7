use std::collections::VecDeque;

use crate::envs::RawObservation;
use crate::scalar::Scalar;

/// Rec.601 luma of an RGB frame, `[height, width]` in `[0, 255]`.
pub fn luma(raw: &RawObservation) -> Vec<f32> {
    raw.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
        .collect()
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let taps = |o: usize, scale: f32, n: usize| {
        let c = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, h);
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Grayscale, resize and quantize to 8 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preprocessor {
    pub height: usize,
    pub width: usize,
}

impl Preprocessor {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn frame(&self, raw: &RawObservation) -> Vec<u8> {
        let y = luma(raw);
        let r = if (raw.height, raw.width) == (self.height, self.width) {
            y
        } else {
            resize_bilinear(&y, raw.height, raw.width, self.height, self.width)
        };
        r.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// The most recent preprocessed frames, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStack {
    depth: usize,
    frame_len: usize,
    frames: VecDeque<Vec<u8>>,
}

impl FrameStack {
    pub fn new(depth: usize, frame_len: usize) -> Self {
        Self { depth, frame_len, frames: VecDeque::with_capacity(depth) }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Fills every slot with the episode's first frame.
    pub fn reset(&mut self, frame: Vec<u8>) {
        assert_eq!(frame.len(), self.frame_len, "frame size");
        self.frames.clear();
        for _ in 0..self.depth {
            self.frames.push_back(frame.clone());
        }
    }

    pub fn push(&mut self, frame: Vec<u8>) {
        assert_eq!(frame.len(), self.frame_len, "frame size");
        if self.frames.len() == self.depth {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    /// Stacked bytes `[depth, h, w]`.
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.depth * self.frame_len);
        for f in &self.frames {
            out.extend_from_slice(f);
        }
        out
    }

    /// Stacked values scaled to `[0, 1]`.
    pub fn values<S: Scalar>(&self) -> Vec<S> {
        bytes_to_unit(&self.bytes())
    }

    pub fn frames(&self) -> impl Iterator<Item = &Vec<u8>> {
        self.frames.iter()
    }

    /// Rebuilds a stack from its [`FrameStack::bytes`] layout.
    pub fn from_bytes(depth: usize, frame_len: usize, bytes: &[u8]) -> Self {
        let frames = bytes.chunks(frame_len).map(|c| c.to_vec()).collect();
        Self { depth, frame_len, frames }
    }
}

pub fn bytes_to_unit<S: Scalar>(bytes: &[u8]) -> Vec<S> {
    let inv = S::lit(1.0 / 255.0);
    bytes.iter().map(|b| S::lit(*b as f64) * inv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_and_white() {
        let p = Preprocessor::new(84, 84);
        let black = RawObservation::filled(210, 160, [0, 0, 0]);
        assert!(p.frame(&black).iter().all(|v| *v == 0));
        let white = RawObservation::filled(210, 160, [255, 255, 255]);
        let mut stack = FrameStack::new(4, 84 * 84);
        stack.reset(p.frame(&white));
        assert!(stack.values::<f32>().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn checkerboard_mean_preserved() {
        let (h, w) = (210, 160);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = if (x / 10 + y / 10) % 2 == 0 { 255 } else { 0 };
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let raw = RawObservation::new(h, w, data).unwrap();
        let resized = Preprocessor::new(84, 84).frame(&raw);
        let mean = resized.iter().map(|v| *v as f64).sum::<f64>() / resized.len() as f64;
        // nearest-neighbour reference
        let src = luma(&raw);
        let mut nn = 0.0;
        for y in 0..84 {
            for x in 0..84 {
                nn += src[(y * h / 84) * w + x * w / 84] as f64;
            }
        }
        let nn_mean = nn / (84.0 * 84.0);
        assert!((mean - nn_mean).abs() / nn_mean < 0.02, "{mean} vs {nn_mean}");
    }

    #[test]
    fn stack_drops_oldest() {
        let mut s = FrameStack::new(3, 1);
        s.reset(vec![1]);
        s.push(vec![2]);
        s.push(vec![3]);
        assert_eq!(s.bytes(), vec![1, 2, 3]);
        s.push(vec![4]);
        assert_eq!(s.bytes(), vec![2, 3, 4]);
        assert_eq!(FrameStack::from_bytes(3, 1, &s.bytes()), s);
    }

    #[test]
    fn halving_averages_pairs() {
        let src = vec![0.0, 100.0, 200.0, 50.0];
        assert_eq!(resize_bilinear(&src, 1, 4, 1, 2), vec![50.0, 125.0]);
    }
}
