use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, MaskRle};

/// Selection provenance of one pseudo-label.
///
/// `bag_plus` and `prm_scores` are index-aligned: the original proposals
/// first, then the augmented positives. Together with `select_box` and the
/// config they are enough to replay box mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LabelScores {
    pub psm_index: usize,
    pub psm_score: f64,
    pub psm_s_dis: f64,
    pub select_index: usize,
    pub select_score: f64,
    pub mask_index: Option<usize>,
    pub aux_indices: Vec<usize>,
    pub bag_plus: Vec<BBox>,
    pub prm_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub instance_id: u64,
    pub class_id: usize,
    pub box_prm: BBox,
    pub mask_prm: Option<MaskRle>,
    pub aux_masks: Vec<MaskRle>,
    pub psm_box: BBox,
    pub select_box: BBox,
    pub scores: LabelScores,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

pub fn save_pseudo_labels(labels: &[PseudoLabel], path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(labels).expect("label serialization is infallible");
    super::write_file(path.as_ref(), &text)
}

pub fn load_pseudo_labels(path: impl AsRef<Path>) -> Result<Vec<PseudoLabel>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_label(rng: &mut ChaCha8Rng) -> PseudoLabel {
        let mut b = || {
            let x: f64 = rng.gen_range(0.0..100.0);
            let y: f64 = rng.gen_range(0.0..100.0);
            BBox::new(x, y, x + rng.gen::<f64>() * 9.0, y + 1.0 / 3.0)
        };
        let (box_prm, psm_box, select_box) = (b(), b(), b());
        let mask = MaskRle::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
        PseudoLabel {
            instance_id: rng.gen(),
            class_id: rng.gen_range(0..5),
            box_prm,
            mask_prm: Some(mask.clone()),
            aux_masks: vec![mask],
            psm_box,
            select_box,
            scores: LabelScores {
                psm_score: rng.gen(),
                select_score: rng.gen(),
                prm_scores: (0..4).map(|_| rng.gen()).collect(),
                bag_plus: vec![box_prm, psm_box],
                ..Default::default()
            },
            diagnostics: vec![],
        }
    }

    #[test]
    fn empty_list_writes_empty_array() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.json");
        save_pseudo_labels(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "[]");
    }

    #[test]
    fn one_label_carries_all_provenance_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let label = random_label(&mut rng);
        let v = serde_json::to_value([&label]).unwrap();
        let rec = v.as_array().unwrap()[0].as_object().unwrap();
        for key in ["instance_id", "class_id", "box_prm", "mask_prm", "aux_masks", "psm_box", "select_box", "scores"] {
            assert!(rec.contains_key(key), "missing {key}");
        }
    }

    #[test]
    fn random_labels_round_trip_byte_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let labels: Vec<_> = (0..100).map(|_| random_label(&mut rng)).collect();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save_pseudo_labels(&labels, &a).unwrap();
        let loaded = load_pseudo_labels(&a).unwrap();
        assert_eq!(loaded, labels);
        save_pseudo_labels(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
