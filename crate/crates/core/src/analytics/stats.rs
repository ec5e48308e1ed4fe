use crate::scalar::Scalar;

pub fn mean<S: Scalar>(xs: &[S]) -> Option<S> {
    if xs.is_empty() {
        return None;
    }
    let sum = xs.iter().fold(S::zero(), |a, &x| a + x);
    Some(sum / S::from_usize(xs.len())?)
}

pub fn median<S: Scalar>(xs: &[S]) -> Option<S> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / S::of(2.0)
    })
}

/// Median absolute deviation from the median, unscaled.
pub fn mad<S: Scalar>(xs: &[S]) -> Option<S> {
    let m = median(xs)?;
    let dev: Vec<S> = xs.iter().map(|&x| (x - m).abs()).collect();
    median(&dev)
}

/// Exponentially weighted moving average seeded with the first sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ewma<S: Scalar> {
    alpha: S,
    value: Option<S>,
}

impl<S: Scalar> Ewma<S> {
    pub fn new(alpha: S) -> Self {
        Ewma { alpha, value: None }
    }

    pub fn update(&mut self, x: S) -> S {
        let v = match self.value {
            None => x,
            Some(prev) => self.alpha * x + (S::one() - self.alpha) * prev,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<S> {
        self.value
    }
}
