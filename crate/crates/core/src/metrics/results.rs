//! COCO keypoint results files: `[{image_id, category_id, keypoints, score}]`.

use serde::{Deserialize, Serialize};

use super::ap::Detection;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ResultEntry {
    image_id: u64,
    #[serde(default = "one")]
    category_id: u64,
    keypoints: Vec<f64>,
    score: f64,
}

fn one() -> u64 {
    1
}

pub fn to_coco_results(dets: &[Detection]) -> Result<String> {
    let entries: Vec<ResultEntry> = dets
        .iter()
        .map(|d| ResultEntry {
            image_id: d.image_id,
            category_id: 1,
            keypoints: d.keypoints.iter().flat_map(|&(x, y)| [x, y, 1.0]).collect(),
            score: d.score,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&entries)?)
}

/// Parses a results file whose entries must carry exactly `num_keypoints` triples.
pub fn parse_coco_results(bytes: &[u8], num_keypoints: usize) -> Result<Vec<Detection>> {
    let entries: Vec<ResultEntry> =
        serde_json::from_slice(bytes).map_err(|e| Error::Annotation(format!("malformed results JSON: {e}")))?;
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            if e.keypoints.len() != 3 * num_keypoints {
                return Err(Error::Annotation(format!(
                    "result {i}: keypoints array has length {}, expected {} ({num_keypoints} keypoints)",
                    e.keypoints.len(),
                    3 * num_keypoints
                )));
            }
            Ok(Detection { image_id: e.image_id, keypoints: e.keypoints.chunks_exact(3).map(|c| (c[0], c[1])).collect(), score: e.score })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_arity_check() {
        let dets = vec![Detection { image_id: 4, keypoints: vec![(1.5, 2.25), (3.0, 4.0)], score: 0.75 }];
        let text = to_coco_results(&dets).unwrap();
        assert_eq!(parse_coco_results(text.as_bytes(), 2).unwrap(), dets);
        assert!(parse_coco_results(text.as_bytes(), 16).is_err());
    }
}
