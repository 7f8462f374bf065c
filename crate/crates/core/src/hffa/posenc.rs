use scb_tensor::{Real, Tensor};

use crate::error::{Error, Result};

pub const TEMPERATURE: f64 = 10000.0;

/// Sine-cosine table for one `h x w` level, `[h*w, d]` in row-major token order.
///
/// The first `d/2` channels encode y and the rest x; within each half even
/// channels are sines and odd channels cosines of `2*pi*(i+0.5)/n` over a
/// geometric frequency ladder.
pub fn sine_table<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Validation(format!("positional encoding needs d_model divisible by 4, got {d}")));
    }
    let half = d / 2;
    let freq: Vec<f64> = (0..half).map(|i| TEMPERATURE.powf((2 * (i / 2)) as f64 / half as f64)).collect();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(h * w * d);
    for y in 0..h {
        let py = (y as f64 + 0.5) / h as f64 * two_pi;
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64 * two_pi;
            for pos in [py, px] {
                for (i, f) in freq.iter().enumerate() {
                    let a = pos / f;
                    out.push(T::from_f64(if i % 2 == 0 { a.sin() } else { a.cos() }));
                }
            }
        }
    }
    Ok(Tensor::new([h * w, d], out)?)
}

/// Tables for several levels stacked in level order, `[sum(h*w), d]`.
pub fn pyramid_table<T: Real>(shapes: &[(usize, usize)], d: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for &(h, w) in shapes {
        data.extend(sine_table::<T>(h, w, d)?.into_data());
    }
    let n = shapes.iter().map(|(h, w)| h * w).sum::<usize>();
    Ok(Tensor::new([n, d], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_d_not_multiple_of_four() {
        assert!(sine_table::<f32>(2, 2, 6).is_err());
    }

    #[test]
    fn values_bounded_and_deterministic() {
        let a = sine_table::<f64>(3, 5, 16).unwrap();
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, sine_table::<f64>(3, 5, 16).unwrap());
    }
}
