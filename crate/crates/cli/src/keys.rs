//! Config key reference printed by `--help`.

use pplab::data_model::PipelineConfig;
use pplab::synth_eval::SyntheticConfig;
use serde_json::Value;

const PUBLISHED: &str = "published";
const CHOSEN: &str = "engine choice";

/// `(key, meaning, origin of the default)` for every pipeline key.
const PIPELINE_KEYS: &[(&str, &str, &str)] = &[
    ("preset", "base preset; only \"paper_defaults\" exists", CHOSEN),
    ("d", "exponent of the point-distance score", PUBLISHED),
    ("distance_form.form", "\"sigmoid\" (sigma(1/w)^d) or \"exponential\" (min(1, scale*e^(d/w)))", CHOSEN),
    ("distance_form.scale", "scale of the exponential form, in (0, 1]", CHOSEN),
    ("v", "jitter scale of positive box augmentation", CHOSEN),
    ("ppg_boxes", "augmented positives per object, 1..=4", CHOSEN),
    ("alpha", "positive-bag weight in the refinement loss", PUBLISHED),
    ("lambda", "selection-loss weight in the combined loss", PUBLISHED),
    ("gamma", "auxiliary-mask loss weight (recorded only)", PUBLISHED),
    ("focal_gamma", "focusing exponent of the positive bag loss", PUBLISHED),
    ("t_neg1", "max IoU of a background negative with any positive", PUBLISHED),
    ("t_neg2", "max IoU of a part negative with its selected box", PUBLISHED),
    ("t_min1", "initial overlap threshold of box mining", PUBLISHED),
    ("t_min2", "initial containment threshold of box mining", PUBLISHED),
    ("k", "top-scored proposals considered by box mining", PUBLISHED),
    ("background_budget", "background negatives per scene", CHOSEN),
    ("part_budget", "part negatives per object", CHOSEN),
    ("train.learning_rate", "SGD step size of both heads", CHOSEN),
    ("train.epochs", "passes over the corpus per head", CHOSEN),
    ("train.hidden", "hidden width of the two-layer trunk", CHOSEN),
    ("train.seed", "initialization and shuffling seed (PPLAB_SEED overrides)", CHOSEN),
    ("toggles.pdg", "point distance guidance", CHOSEN),
    ("toggles.prm", "second-stage refinement head", CHOSEN),
    ("toggles.pnpg", "positive and negative proposal generation", CHOSEN),
    ("toggles.bms", "box mining", CHOSEN),
    ("toggles.mps", "auxiliary mask selection", CHOSEN),
];

const SYNTH_KEYS: &[(&str, &str)] = &[
    ("num_scenes", "scenes to generate"),
    ("width", "scene width in pixels"),
    ("height", "scene height in pixels"),
    ("num_classes", "object classes K"),
    ("min_objects", "fewest objects per scene"),
    ("max_objects", "most objects per scene"),
    ("min_object_size", "smallest object side"),
    ("max_object_size", "largest object side"),
    ("adjacency_rate", "chance an object becomes the aligned twin of an earlier one of its class"),
    ("part_rate", "chance an object has a rimmed core and part proposals"),
    ("ellipse_rate", "share of ellipses among objects without parts"),
    ("rim_width", "rim width as a fraction of the half-size"),
    ("proposals_per_bag", "proposals per annotated point"),
    ("feature_dim", "proposal feature length (at least K + 4)"),
    ("pixel_noise", "chance a pixel gets a random label"),
    ("seed", "corpus seed (PPLAB_SEED overrides)"),
];

/// Dotted leaf paths of a JSON object with their rendered values.
pub fn flatten(value: &Value) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            leaf => out.push((prefix.to_string(), leaf.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out
}

fn default_of(defaults: &[(String, String)], key: &str) -> String {
    match key {
        "preset" => "\"paper_defaults\"".into(),
        "distance_form.scale" => "- (exponential form only)".into(),
        _ => defaults
            .iter()
            .find(|(k, _)| k == key)
            .map_or_else(|| "-".into(), |(_, v)| v.clone()),
    }
}

/// Help text listing every pipeline and generator key with its default.
pub fn reference() -> String {
    let pipeline = flatten(&serde_json::to_value(PipelineConfig::default()).expect("serializable"));
    let synth = flatten(&serde_json::to_value(SyntheticConfig::default()).expect("serializable"));
    let mut s = String::from("Pipeline config keys (run --config), default and origin:\n");
    for (key, meaning, origin) in PIPELINE_KEYS {
        s.push_str(&format!("  {key:<22} {:<10} {meaning} [{origin}]\n", default_of(&pipeline, key)));
    }
    s.push_str("\nSynthetic corpus keys (synth --config), default:\n");
    for (key, meaning) in SYNTH_KEYS {
        s.push_str(&format!("  {key:<22} {:<10} {meaning}\n", default_of(&synth, key)));
    }
    s.push_str(
        "\nMissing keys take their defaults. Unknown keys are rejected.\n\
         Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error.\n\
         PPLAB_SEED, when set, replaces the seed of every subcommand.\n",
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_key_is_documented() {
        let text = reference();
        for cfg in [
            serde_json::to_value(PipelineConfig::default()).unwrap(),
            serde_json::to_value(SyntheticConfig::default()).unwrap(),
        ] {
            for (key, value) in flatten(&cfg) {
                let line = text
                    .lines()
                    .find(|l| l.split_whitespace().next() == Some(key.as_str()))
                    .unwrap_or_else(|| panic!("{key} missing from help"));
                assert!(line.contains(&value), "{key}: default {value} not shown in {line:?}");
            }
        }
    }
}
