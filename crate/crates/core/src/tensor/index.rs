//! Index maps for [`Var::gather`](super::Var::gather): `out[i] = in[map[i]]`.
//!
//! All layout-only transforms (space-to-depth, channel slicing and reversal,
//! per-channel broadcast, cropping, neighbor differences) are expressed as
//! gathers, so one backward rule (scatter-add) covers them.

use crate::error::{Error, Result};

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::invalid(format!("expected rank-4 shape, got {shape:?}"))),
    }
}

/// 2x2 space-to-depth: `[B,C,H,W] -> [B,4C,H/2,W/2]`; output channel `4c + 2dy + dx`.
pub fn squeeze2x2(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = dims4(shape)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "squeeze needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for sub in 0..4 {
                let (dy, dx) = (sub / 2, sub % 2);
                for y in 0..oh {
                    for x in 0..ow {
                        map.push(((bi * c + ci) * h + 2 * y + dy) * w + 2 * x + dx);
                    }
                }
            }
        }
    }
    Ok((vec![b, 4 * c, oh, ow], map))
}

/// Inverse of [`squeeze2x2`]: `[B,4C,H,W] -> [B,C,2H,2W]`.
pub fn unsqueeze2x2(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c4, h, w) = dims4(shape)?;
    if c4 % 4 != 0 {
        return Err(Error::invalid(format!(
            "unsqueeze needs a multiple of 4 channels, got {c4}"
        )));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut map = Vec::with_capacity(b * c4 * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let sub = (y % 2) * 2 + x % 2;
                    map.push(((bi * c4 + 4 * ci + sub) * h + y / 2) * w + x / 2);
                }
            }
        }
    }
    Ok((vec![b, c, oh, ow], map))
}

/// Channel range `[start, start+len)` of a `[B,C,H,W]` tensor.
pub fn channel_slice(shape: &[usize], start: usize, len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = dims4(shape)?;
    if start + len > c {
        return Err(Error::invalid(format!(
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        )));
    }
    let plane = h * w;
    let mut map = Vec::with_capacity(b * len * plane);
    for bi in 0..b {
        for ci in start..start + len {
            let base = (bi * c + ci) * plane;
            map.extend(base..base + plane);
        }
    }
    Ok((vec![b, len, h, w], map))
}

/// Reverses the channel order.
pub fn channel_reverse(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = dims4(shape)?;
    let plane = h * w;
    let mut map = Vec::with_capacity(b * c * plane);
    for bi in 0..b {
        for ci in (0..c).rev() {
            let base = (bi * c + ci) * plane;
            map.extend(base..base + plane);
        }
    }
    Ok((shape.to_vec(), map))
}

/// Broadcasts a per-channel vector `[C]` to `[B,C,H,W]`.
pub fn channel_broadcast(channels: usize, target: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = dims4(target)?;
    if c != channels {
        return Err(Error::ChannelMismatch {
            op: "channel_broadcast",
            got: channels,
            expected: c,
        });
    }
    let mut map = Vec::with_capacity(b * c * h * w);
    for _ in 0..b {
        for ci in 0..c {
            map.extend(std::iter::repeat_n(ci, h * w));
        }
    }
    Ok((target.to_vec(), map))
}

/// Broadcasts per-plane statistics `[B,C]` to `[B,C,H,W]`.
pub fn plane_broadcast(target: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = dims4(target)?;
    let mut map = Vec::with_capacity(b * c * h * w);
    for bc in 0..b * c {
        map.extend(std::iter::repeat_n(bc, h * w));
    }
    Ok((target.to_vec(), map))
}

/// Broadcasts per-sample values `[B]` to `[B,C,H,W]`.
pub fn sample_broadcast(target: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = dims4(target)?;
    let mut map = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        map.extend(std::iter::repeat_n(bi, c * h * w));
    }
    Ok((target.to_vec(), map))
}

/// Removes `margin` pixels from every spatial border.
pub fn crop(shape: &[usize], margin: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = dims4(shape)?;
    if 2 * margin >= h || 2 * margin >= w {
        return Err(Error::invalid(format!(
            "crop margin {margin} too large for {h}x{w}"
        )));
    }
    let (oh, ow) = (h - 2 * margin, w - 2 * margin);
    let mut map = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        for y in margin..margin + oh {
            let row = (bc * h + y) * w;
            map.extend(row + margin..row + margin + ow);
        }
    }
    Ok((vec![b, c, oh, ow], map))
}

/// Pairs of horizontally (`axis = 3`) or vertically (`axis = 2`) adjacent
/// pixels: returns the index maps of the "next" and "current" elements.
pub fn neighbor_pairs(shape: &[usize], axis: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (b, c, h, w) = dims4(shape)?;
    let (oh, ow, step) = match axis {
        2 if h >= 2 => (h - 1, w, w),
        3 if w >= 2 => (h, w - 1, 1),
        2 | 3 => return Err(Error::invalid(format!("no adjacent pairs in {h}x{w}"))),
        _ => return Err(Error::InvalidAxis { axis, rank: 4 }),
    };
    let n = b * c * oh * ow;
    let mut next = Vec::with_capacity(n);
    let mut cur = Vec::with_capacity(n);
    for bc in 0..b * c {
        for y in 0..oh {
            for x in 0..ow {
                let i = (bc * h + y) * w + x;
                cur.push(i);
                next.push(i + step);
            }
        }
    }
    Ok((vec![b, c, oh, ow], next, cur))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn compose(a: &[usize], b: &[usize]) -> Vec<usize> {
        // (x gathered by a) gathered by b == x gathered by a[b[i]]
        b.iter().map(|&i| a[i]).collect()
    }

    #[test]
    fn squeeze_unsqueeze_are_inverse_permutations() {
        let shape = [2, 3, 4, 6];
        let (sq_shape, sq) = squeeze2x2(&shape).unwrap();
        let (un_shape, un) = unsqueeze2x2(&sq_shape).unwrap();
        assert_eq!(un_shape, shape);
        let id: Vec<usize> = (0..sq.len()).collect();
        assert_eq!(compose(&sq, &un), id);
        assert_eq!(compose(&un, &sq), id);
    }

    #[test]
    fn squeeze_rejects_odd_sizes() {
        assert!(squeeze2x2(&[1, 1, 3, 4]).is_err());
    }

    #[test]
    fn crop_and_pairs_sizes() {
        let (s, m) = crop(&[1, 1, 6, 6], 2).unwrap();
        assert_eq!(s, vec![1, 1, 2, 2]);
        assert_eq!(m, vec![14, 15, 20, 21]);
        let (s, next, cur) = neighbor_pairs(&[1, 1, 2, 2], 3).unwrap();
        assert_eq!(s, vec![1, 1, 2, 1]);
        assert_eq!(next, vec![1, 3]);
        assert_eq!(cur, vec![0, 2]);
    }
}
