//! Real spherical-harmonics basis up to band 2.

use crate::{Error, Result};

pub const SH_C0: f64 = 0.282095;
pub const SH_C1: f64 = 0.488603;
pub const SH_C2: f64 = 1.092548;
pub const SH_C3: f64 = 0.315392;
pub const SH_C4: f64 = 0.546274;

/// The nine real SH basis values at a unit direction.
///
/// Ordering: `Y00, Y1-1 (y), Y10 (z), Y11 (x), xy, yz, 3z²-1, xz, x²-y²`.
pub fn sh_basis(normal: [f64; 3]) -> Result<[f64; 9]> {
    let len = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "sh_basis needs a unit normal, got length {len}"
        )));
    }
    Ok(sh_basis_unchecked(normal))
}

#[inline]
pub(crate) fn sh_basis_unchecked(n: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = n;
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Irradiance `Σ_k lighting_k · Y_k(n)` for monochrome coefficients.
#[inline]
pub fn irradiance(lighting: &[f32; 9], n: [f64; 3]) -> f64 {
    let y = sh_basis_unchecked(n);
    lighting
        .iter()
        .zip(y.iter())
        .map(|(l, b)| *l as f64 * b)
        .sum()
}

/// Energy per band: `(E0, E1, E2)`.
pub fn band_energies(y: &[f64; 9]) -> [f64; 3] {
    [
        y[0] * y[0],
        y[1] * y[1] + y[2] * y[2] + y[3] * y[3],
        y[4..].iter().map(|v| v * v).sum(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn basis_at_poles() {
        let z = sh_basis([0.0, 0.0, 1.0]).unwrap();
        close(
            &z,
            &[0.282095, 0.0, 0.488603, 0.0, 0.0, 0.0, 0.630784, 0.0, 0.0],
            1e-12,
        );
        let x = sh_basis([1.0, 0.0, 0.0]).unwrap();
        close(
            &x,
            &[0.282095, 0.0, 0.0, 0.488603, 0.0, 0.0, -0.315392, 0.0, 0.546274],
            1e-12,
        );
    }

    #[test]
    fn rejects_non_unit() {
        assert!(matches!(
            sh_basis([0.0, 0.0, 1.1]),
            Err(Error::Contract(_))
        ));
        assert!(sh_basis([0.0, 0.0, 1.0 + 5e-7]).is_ok());
    }
}
