//! Shape arithmetic and the strided kernels behind broadcasting.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style right-aligned broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Whether `src` can be broadcast to `dst`.
pub fn broadcastable(src: &[usize], dst: &[usize]) -> bool {
    src.len() <= dst.len()
        && src
            .iter()
            .rev()
            .zip(dst.iter().rev())
            .all(|(&s, &d)| s == d || s == 1)
}

/// Strides of `src` viewed in the rank of `dst`; broadcast dimensions get stride 0.
fn expanded_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let pad = rank - src.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + pad] = if src[i] == 1 && dst[i + pad] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

pub fn broadcast_values(src: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let n = numel(dst_shape);
    if dst_shape.is_empty() {
        return vec![src[0]];
    }
    let strides = expanded_strides(src_shape, dst_shape);
    let mut out = Vec::with_capacity(n);
    fn rec(dim: usize, offset: usize, src: &[f64], strides: &[usize], shape: &[usize], out: &mut Vec<f64>) {
        let last = shape.len() - 1;
        if dim == last {
            if strides[dim] == 0 {
                out.extend(std::iter::repeat_n(src[offset], shape[dim]));
            } else {
                out.extend_from_slice(&src[offset..offset + shape[dim]]);
            }
        } else {
            for i in 0..shape[dim] {
                rec(dim + 1, offset + i * strides[dim], src, strides, shape, out);
            }
        }
    }
    if n > 0 {
        rec(0, 0, src, &strides, dst_shape, &mut out);
    }
    out
}

/// Adjoint of [`broadcast_values`]: sums `src` (shaped `src_shape`) down to `dst_shape`.
pub fn sum_to_values(src: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(dst_shape)];
    if src_shape.is_empty() {
        out[0] = src[0];
        return out;
    }
    if numel(src_shape) == 0 {
        return out;
    }
    let strides = expanded_strides(dst_shape, src_shape);
    fn rec(dim: usize, offset: usize, pos: &mut usize, src: &[f64], strides: &[usize], shape: &[usize], out: &mut [f64]) {
        let last = shape.len() - 1;
        if dim == last {
            if strides[dim] == 0 {
                let mut acc = 0.0;
                for k in 0..shape[dim] {
                    acc += src[*pos + k];
                }
                out[offset] += acc;
            } else {
                for (o, s) in out[offset..offset + shape[dim]]
                    .iter_mut()
                    .zip(&src[*pos..*pos + shape[dim]])
                {
                    *o += *s;
                }
            }
            *pos += shape[dim];
        } else {
            for i in 0..shape[dim] {
                rec(dim + 1, offset + i * strides[dim], pos, src, strides, shape, out);
            }
        }
    }
    let mut pos = 0;
    rec(0, 0, &mut pos, src, &strides, src_shape, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[3, 1], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shapes(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shapes(&[3], &[4]), None);
    }

    #[test]
    fn expand_and_reduce_are_adjoint() {
        let src = [1.0, 2.0, 3.0];
        let out = broadcast_values(&src, &[3, 1], &[3, 2]);
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let back = sum_to_values(&out, &[3, 2], &[3, 1]);
        assert_eq!(back, vec![2.0, 4.0, 6.0]);
        let row = broadcast_values(&[1.0, 2.0], &[2], &[2, 2]);
        assert_eq!(row, vec![1.0, 2.0, 1.0, 2.0]);
        assert_eq!(sum_to_values(&row, &[2, 2], &[2]), vec![2.0, 4.0]);
        assert_eq!(sum_to_values(&row, &[2, 2], &[]), vec![6.0]);
    }
}
