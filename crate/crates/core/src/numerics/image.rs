use crate::{Error, Result};

/// Square real image stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    n: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Side lengths must be a power of two no smaller than 4.
    pub fn valid_side(n: usize) -> bool {
        n >= 4 && n.is_power_of_two()
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_vec(n, vec![0.0; n * n]).expect("zero image of valid side")
    }

    pub fn from_vec(n: usize, pixels: Vec<f64>) -> Result<Self> {
        if !Self::valid_side(n) {
            return Err(Error::Invalid(format!(
                "image side {n} must be a power of two >= 4"
            )));
        }
        if pixels.len() != n * n {
            return Err(Error::Shape(format!(
                "expected {} pixels for side {n}, got {}",
                n * n,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                layer: "image".into(),
            });
        }
        Ok(Self { n, pixels })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                pixels.push(f(r, c));
            }
        }
        Self::from_vec(n, pixels)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.n + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.n + c] = v;
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Fourier coefficients of an [`Image`], split into real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpace {
    pub n: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl KSpace {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            re: vec![0.0; n * n],
            im: vec![0.0; n * n],
        }
    }

    /// Real plane followed by imaginary plane, width `2n²`.
    pub fn to_concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.re.len());
        v.extend_from_slice(&self.re);
        v.extend_from_slice(&self.im);
        v
    }

    pub fn from_concat(n: usize, values: &[f64]) -> Result<Self> {
        if values.len() != 2 * n * n {
            return Err(Error::Shape(format!(
                "k-space concat for side {n} needs {} values, got {}",
                2 * n * n,
                values.len()
            )));
        }
        let (re, im) = values.split_at(n * n);
        Ok(Self {
            n,
            re: re.to_vec(),
            im: im.to_vec(),
        })
    }
}
