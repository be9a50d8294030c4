/// Binary moving-object label attached to a point or a range-image pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MovingLabel {
    #[default]
    Static,
    Moving,
    /// Unlabeled or outlier; excluded from scoring.
    Ignore,
}

impl MovingLabel {
    pub fn is_moving(self) -> bool {
        self == MovingLabel::Moving
    }
}

/// Row-major `height x width` grid of labels aligned with a range image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<MovingLabel>,
}

impl LabelGrid {
    pub fn filled(height: usize, width: usize, label: MovingLabel) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> MovingLabel {
        self.labels[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, label: MovingLabel) {
        self.labels[v * self.width + u] = label;
    }

    pub fn count(&self, label: MovingLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}
