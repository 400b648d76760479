use super::BackboneError;

/// Dense row-major tensor as used by the interpreter.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::F32 { shape, data }
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::I64 { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32 { shape, .. } | Tensor::I64 { shape, .. } => shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Result<&[f32], BackboneError> {
        match self {
            Tensor::F32 { data, .. } => Ok(data),
            _ => Err(BackboneError::Runtime("expected a float tensor".into())),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64], BackboneError> {
        match self {
            Tensor::I64 { data, .. } => Ok(data),
            _ => Err(BackboneError::Runtime("expected an int64 tensor".into())),
        }
    }

    /// Integer view of a small tensor (shape arguments, axes).
    pub fn to_i64_vec(&self) -> Vec<i64> {
        match self {
            Tensor::I64 { data, .. } => data.clone(),
            Tensor::F32 { data, .. } => data.iter().map(|&v| v as i64).collect(),
        }
    }

    pub fn with_shape(self, new_shape: Vec<usize>) -> Result<Tensor, BackboneError> {
        if new_shape.iter().product::<usize>() != self.len() {
            return Err(BackboneError::Runtime(format!("cannot reshape {:?} into {:?}", self.shape(), new_shape)));
        }
        Ok(match self {
            Tensor::F32 { data, .. } => Tensor::F32 { shape: new_shape, data },
            Tensor::I64 { data, .. } => Tensor::I64 { shape: new_shape, data },
        })
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Resolves a possibly negative axis against `rank`.
pub fn normalize_axis(axis: i64, rank: usize) -> Result<usize, BackboneError> {
    let a = if axis < 0 { axis + rank as i64 } else { axis };
    if a < 0 || a as usize >= rank.max(1) {
        return Err(BackboneError::Runtime(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, BackboneError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(BackboneError::Runtime(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Element offsets of `src_shape` data broadcast to `out_shape`.
pub fn broadcast_offsets(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - src_shape.len();
    let src_strides = strides(src_shape);
    let eff: Vec<usize> =
        (0..rank).map(|i| if i < pad || src_shape[i - pad] == 1 { 0 } else { src_strides[i - pad] }).collect();
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        offsets.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offsets
}

pub fn broadcast_binary<T: Copy>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>), BackboneError> {
    if a_shape == b_shape {
        return Ok((a_shape.to_vec(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()));
    }
    let out_shape = broadcast_shape(a_shape, b_shape)?;
    if b.len() == 1 && out_shape == a_shape {
        return Ok((out_shape, a.iter().map(|&x| f(x, b[0])).collect()));
    }
    let oa = broadcast_offsets(a_shape, &out_shape);
    let ob = broadcast_offsets(b_shape, &out_shape);
    Ok((out_shape, oa.iter().zip(&ob).map(|(&i, &j)| f(a[i], b[j])).collect()))
}

/// out[m×n] = a[m×k] · b[k×n], accumulated in f32 in a fixed order.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
        let (s, v) =
            broadcast_binary(&[1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[10.0, 20.0], &[2, 1], |a, b| a + b)
                .unwrap();
        assert_eq!(s, vec![2, 3]);
        assert_eq!(v, vec![11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
    }

    #[test]
    fn small_matmul() {
        // [1 2; 3 4] · [5; 6] = [17; 39]
        assert_eq!(matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1), vec![17.0, 39.0]);
    }

    #[test]
    fn negative_axes() {
        assert_eq!(normalize_axis(-1, 4).unwrap(), 3);
        assert!(normalize_axis(4, 4).is_err());
    }
}
