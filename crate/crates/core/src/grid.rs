//! Frame-level containers: feature grids, label grids and the class registry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u32;

/// Label for cells excluded from training and evaluation.
pub const IGNORE: ClassId = u32::MAX;
/// Label for cells belonging to no registered class.
pub const OOD: ClassId = u32::MAX - 1;

pub fn is_reserved(label: ClassId) -> bool {
    label == IGNORE || label == OOD
}

/// An `height x width` grid of `dim`-dimensional feature vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub frame_id: String,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        frame_id: impl Into<String>,
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidInput("feature grid with zero extent".into()));
        }
        if data.len() != height * width * dim {
            return Err(Error::InvalidInput(format!(
                "feature grid data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature grid component {i}")));
        }
        Ok(Self {
            frame_id: frame_id.into(),
            height,
            width,
            dim,
            data,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.cell(row * self.width + col)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-cell class labels, row-major, aligned with a [`FeatureGrid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub frame_id: String,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<ClassId>,
}

impl LabelGrid {
    pub fn new(
        frame_id: impl Into<String>,
        height: usize,
        width: usize,
        labels: Vec<ClassId>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "label grid length {} != {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            frame_id: frame_id.into(),
            height,
            width,
            labels,
        })
    }

    pub fn filled(frame_id: impl Into<String>, height: usize, width: usize, label: ClassId) -> Self {
        Self {
            frame_id: frame_id.into(),
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn cells(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, row: usize, col: usize) -> ClassId {
        self.labels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &LabelGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn matches(&self, features: &FeatureGrid) -> bool {
        self.height == features.height && self.width == features.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrigin {
    Seed,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub id: ClassId,
    pub name: String,
    pub origin: ClassOrigin,
}

/// Ordered class set. Ids are contiguous from zero; seed classes come first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    classes: Vec<ClassRecord>,
}

impl ClassRegistry {
    pub fn with_seed_classes<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut registry = Self::default();
        for name in names {
            registry.register(name.as_ref(), ClassOrigin::Seed)?;
        }
        Ok(registry)
    }

    pub fn register(&mut self, name: &str, origin: ClassOrigin) -> Result<ClassId> {
        if self.id_of(name).is_some() {
            return Err(Error::DuplicateClass(name.to_string()));
        }
        if origin == ClassOrigin::Seed
            && self.classes.iter().any(|c| c.origin == ClassOrigin::Incremental)
        {
            return Err(Error::InvalidInput(
                "seed classes must precede incremental classes".into(),
            ));
        }
        let id = self.classes.len() as ClassId;
        self.classes.push(ClassRecord {
            id,
            name: name.to_string(),
            origin,
        });
        Ok(id)
    }

    /// Rebuilds a registry from records, validating the id and ordering invariants.
    pub fn from_records(records: Vec<ClassRecord>) -> Result<Self> {
        let mut registry = Self::default();
        for (i, record) in records.iter().enumerate() {
            if record.id as usize != i {
                return Err(Error::InvalidInput(format!(
                    "class ids not contiguous at {i}"
                )));
            }
            registry.register(&record.name, record.origin)?;
        }
        Ok(registry)
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassRecord> {
        self.classes.get(id as usize)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (id as usize) < self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn seed_count(&self) -> usize {
        self.classes
            .iter()
            .filter(|c| c.origin == ClassOrigin::Seed)
            .count()
    }

    pub fn records(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn next_id(&self) -> ClassId {
        self.classes.len() as ClassId
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_grid_rejects_bad_length_and_nan() {
        assert!(FeatureGrid::new("f", 2, 2, 3, vec![0.0; 11]).is_err());
        let mut data = vec![0.0; 12];
        data[5] = f64::NAN;
        assert!(matches!(
            FeatureGrid::new("f", 2, 2, 3, data),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn registry_ids_are_contiguous_and_ordered() {
        let mut reg = ClassRegistry::with_seed_classes(&["road", "car"]).unwrap();
        assert_eq!(reg.register("box", ClassOrigin::Incremental).unwrap(), 2);
        assert!(matches!(
            reg.register("car", ClassOrigin::Incremental),
            Err(Error::DuplicateClass(_))
        ));
        assert!(reg.register("late_seed", ClassOrigin::Seed).is_err());
        assert_eq!(reg.seed_count(), 2);
        let rebuilt = ClassRegistry::from_records(reg.records().to_vec()).unwrap();
        assert_eq!(rebuilt, reg);
    }
}
