use super::render::RenderBundle;
use crate::raster::Raster;
use crate::{Error, Result};

pub const CONTROL_CHANNELS: usize = 9;

/// The nine-channel conditioning stack: normals `[0..3)`, albedo `[3..6)`,
/// Lambertian shading `[6..9)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMaps {
    pub data: Raster,
}

impl ControlMaps {
    pub fn new(data: Raster) -> Result<Self> {
        if data.channels != CONTROL_CHANNELS {
            return Err(Error::shape(format!(
                "control maps need {CONTROL_CHANNELS} channels, got {}",
                data.channels
            )));
        }
        Ok(ControlMaps { data })
    }

    /// The all-zero control used as the null condition.
    pub fn null(res: usize) -> Self {
        ControlMaps {
            data: Raster::filled(res, CONTROL_CHANNELS, 0.0),
        }
    }

    pub fn res(&self) -> usize {
        self.data.res
    }

    pub fn normals(&self) -> Raster {
        self.data.slice_channels(0, 3).expect("9-channel raster")
    }

    pub fn albedo(&self) -> Raster {
        self.data.slice_channels(3, 3).expect("9-channel raster")
    }

    pub fn shaded(&self) -> Raster {
        self.data.slice_channels(6, 3).expect("9-channel raster")
    }

    /// `(normals, albedo, shaded)`.
    pub fn split(&self) -> (Raster, Raster, Raster) {
        (self.normals(), self.albedo(), self.shaded())
    }
}

/// Stacks a render's normals, albedo and shaded planes in that order.
pub fn make_control(bundle: &RenderBundle) -> Result<ControlMaps> {
    let res = bundle.image.res;
    for (name, plane) in [
        ("normals", &bundle.normals),
        ("albedo", &bundle.albedo),
        ("shaded", &bundle.shaded),
    ] {
        if plane.res != res || plane.channels != 3 {
            return Err(Error::contract(format!(
                "{name} plane is {}x{}x{}, expected {res}x{res}x3",
                plane.res, plane.res, plane.channels
            )));
        }
    }
    ControlMaps::new(Raster::concat_channels(&[
        &bundle.normals,
        &bundle.albedo,
        &bundle.shaded,
    ])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::{render_face, sample_identity, sample_state, FaceParams};

    #[test]
    fn slices_match_planes_bitwise() {
        let id = sample_identity(4);
        let b = render_face(&FaceParams::new(id, sample_state(&id, 8)), 32).unwrap();
        let c = make_control(&b).unwrap();
        let (n, a, s) = c.split();
        assert_eq!(n, b.normals);
        assert_eq!(a, b.albedo);
        assert_eq!(s, b.shaded);
        assert!(c.data.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mismatched_planes_are_rejected() {
        let id = sample_identity(4);
        let mut b = render_face(&FaceParams::new(id, sample_state(&id, 8)), 32).unwrap();
        b.albedo = Raster::filled(16, 3, 0.0);
        assert!(matches!(make_control(&b), Err(Error::Contract(_))));
    }
}
