use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Ellipse,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Triangle];
}

/// Geometry of the MiniSprites family.
///
/// Factor order is fixed: shape, scale, pos_x, pos_y, then an optional
/// intensity factor. Without the intensity factor sprites are drawn at 255.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniSprites {
    pub height: usize,
    pub width: usize,
    pub scales: usize,
    pub positions: usize,
    pub intensities: Option<usize>,
    /// Half-extent of the sprite at the smallest and largest scale, in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Whether intensity gets its own factor subspace instead of being left to S.
    pub intensity_supervised: bool,
}

impl Default for MiniSprites {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            scales: 4,
            positions: 8,
            intensities: Some(4),
            min_radius: 3.0,
            max_radius: 6.0,
            intensity_supervised: false,
        }
    }
}

impl MiniSprites {
    pub fn num_factors(&self) -> usize {
        4 + usize::from(self.intensities.is_some())
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        let mut c = vec![Shape::ALL.len(), self.scales, self.positions, self.positions];
        c.extend(self.intensities);
        c
    }

    /// Rejects geometries where a sprite at the largest scale cannot fit on
    /// the canvas at every grid position.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |detail: String| Err(DataError::Config(detail));
        if self.scales < 2 || self.positions < 2 {
            return bad("scale and position factors need at least 2 values".into());
        }
        if let Some(g) = self.intensities {
            if !(2..=256).contains(&g) {
                return bad(format!("intensity levels must be in 2..=256, got {g}"));
            }
        }
        if !(self.min_radius > 0.0 && self.min_radius < self.max_radius) {
            return bad(format!(
                "radii must satisfy 0 < min < max, got {} and {}",
                self.min_radius, self.max_radius
            ));
        }
        let span = 2.0 * self.max_radius + 1.0;
        if span >= self.height.min(self.width) as f64 {
            return bad(format!(
                "sprite of extent {span} px at max scale exceeds the {}x{} canvas",
                self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn radius(&self, scale: usize) -> f64 {
        let t = scale as f64 / (self.scales - 1) as f64;
        self.min_radius + t * (self.max_radius - self.min_radius)
    }

    /// Sprite center along an axis of the given extent: evenly spaced so the
    /// largest sprite stays inside the canvas at both ends.
    pub fn center(&self, pos: usize, extent: usize) -> f64 {
        let lo = self.max_radius + 0.5;
        let hi = extent as f64 - 0.5 - self.max_radius;
        lo + pos as f64 * (hi - lo) / (self.positions - 1) as f64
    }

    pub fn intensity(&self, level: usize) -> u8 {
        match self.intensities {
            Some(g) => (256 * (level + 1) / g).min(255) as u8,
            None => 255,
        }
    }

    /// Renders one grayscale sprite. Pure function of `tuple`, which must
    /// hold one in-range value per factor.
    pub fn render(&self, tuple: &[usize]) -> Vec<u8> {
        let shape = Shape::ALL[tuple[0]];
        let r = self.radius(tuple[1]);
        let cx = self.center(tuple[2], self.width);
        let cy = self.center(tuple[3], self.height);
        let value = self.intensity(tuple.get(4).copied().unwrap_or(0));
        let mut img = vec![0u8; self.height * self.width];
        for y in 0..self.height {
            let dy = y as f64 + 0.5 - cy;
            for x in 0..self.width {
                let dx = x as f64 + 0.5 - cx;
                let inside = match shape {
                    Shape::Square => dx.abs() <= r && dy.abs() <= r,
                    Shape::Ellipse => (dx / r).powi(2) + (dy / (0.7 * r)).powi(2) <= 1.0,
                    Shape::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
                };
                if inside {
                    img[y * self.width + x] = value;
                }
            }
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_is_valid() {
        MiniSprites::default().validate().unwrap();
    }

    #[test]
    fn oversize_sprite_is_a_config_error() {
        let cfg = MiniSprites {
            height: 12,
            width: 12,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(DataError::Config(_))));
    }

    #[test]
    fn intensity_levels() {
        let cfg = MiniSprites::default();
        let levels: Vec<u8> = (0..4).map(|i| cfg.intensity(i)).collect();
        assert_eq!(levels, vec![64, 128, 192, 255]);
    }

    #[test]
    fn render_is_pure() {
        let cfg = MiniSprites::default();
        assert_eq!(cfg.render(&[2, 1, 3, 5, 2]), cfg.render(&[2, 1, 3, 5, 2]));
    }

    #[test]
    fn lowest_intensity_caps_pixels() {
        let cfg = MiniSprites::default();
        for shape in 0..3 {
            let img = cfg.render(&[shape, 3, 4, 4, 0]);
            assert_eq!(img.iter().copied().max(), Some(64));
        }
    }

    #[test]
    fn min_scale_origin_square_stays_in_top_left_quadrant() {
        let cfg = MiniSprites::default();
        let img = cfg.render(&[0, 0, 0, 0, 3]);
        let mut lit = 0;
        for y in 0..32 {
            for x in 0..32 {
                if img[y * 32 + x] > 0 {
                    lit += 1;
                    assert!(x < 16 && y < 16, "pixel ({x},{y}) outside quadrant");
                }
            }
        }
        assert!(lit > 0);
    }

    #[test]
    fn shapes_render_differently() {
        let cfg = MiniSprites::default();
        let imgs: Vec<_> = (0..3).map(|s| cfg.render(&[s, 0, 3, 3, 3])).collect();
        assert_ne!(imgs[0], imgs[1]);
        assert_ne!(imgs[1], imgs[2]);
        assert_ne!(imgs[0], imgs[2]);
    }
}
