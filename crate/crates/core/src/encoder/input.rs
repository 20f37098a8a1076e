use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, CLS, SEP, TEXT_SEGMENT};
use crate::error::{Error, Result};

/// A tokenized sentence `[CLS] w_1 … w_m [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
}

impl TextInput {
    /// Wraps word ids with [CLS]/[SEP]; every token gets the text segment.
    pub fn from_words(words: &[usize]) -> Self {
        let mut token_ids = Vec::with_capacity(words.len() + 2);
        token_ids.push(CLS);
        token_ids.extend_from_slice(words);
        token_ids.push(SEP);
        let segment_ids = vec![TEXT_SEGMENT; token_ids.len()];
        TextInput { token_ids, segment_ids }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of real words between [CLS] and [SEP].
    pub fn num_words(&self) -> usize {
        self.token_ids.len().saturating_sub(2)
    }

    pub fn words(&self) -> &[usize] {
        &self.token_ids[1..self.token_ids.len() - 1]
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let n = self.token_ids.len();
        if n < 2 || self.token_ids[0] != CLS || self.token_ids[n - 1] != SEP {
            return Err(Error::invalid(
                "TextInput",
                "sequence must start with [CLS] and end with [SEP]",
            ));
        }
        if n > config.max_positions() {
            return Err(Error::invalid(
                "TextInput",
                format!("{} words exceed max_text_len {}", n - 2, config.max_text_len),
            ));
        }
        if self.segment_ids.len() != n {
            return Err(Error::invalid("TextInput", "segment_ids length differs"));
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
        if self.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::invalid("TextInput", "segment id must be 0 or 1"));
        }
        Ok(())
    }
}

/// Region features for one image: `n` detected objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInput {
    pub features: Vec<Vec<f64>>,
    /// `(x1, y1, x2, y2)` in pixels.
    pub boxes: Vec<[f64; 4]>,
    /// `(W, H)`
    pub image_size: (f64, f64),
    pub detector_labels: Vec<usize>,
}

impl ObjectInput {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let n = self.features.len();
        if self.boxes.len() != n || self.detector_labels.len() != n {
            return Err(Error::invalid(
                "ObjectInput",
                "features, boxes and labels must have equal length",
            ));
        }
        if let Some(f) = self.features.iter().find(|f| f.len() != config.object_feature_dim) {
            return Err(Error::shape("ObjectInput", &[f.len()], &[config.object_feature_dim]));
        }
        for b in &self.boxes {
            location_vector(*b, self.image_size)?;
        }
        Ok(())
    }

    /// Rows of `f_j ⊕ l_j`.
    pub fn projected_inputs(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (f, b) in self.features.iter().zip(&self.boxes) {
            out.extend_from_slice(f);
            out.extend_from_slice(&location_vector(*b, self.image_size)?);
        }
        Ok(out)
    }
}

/// Normalized box location `(x1/W, y1/H, x2/W, y2/H)`.
pub fn location_vector(bbox: [f64; 4], image_size: (f64, f64)) -> Result<[f64; 4]> {
    let (w, h) = image_size;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::DegenerateImage { width: w, height: h });
    }
    let [x1, y1, x2, y2] = bbox;
    let inside = 0.0 <= x1 && x1 <= x2 && x2 <= w && 0.0 <= y1 && y1 <= y2 && y2 <= h;
    if !inside {
        return Err(Error::BoxOutsideImage {
            bbox,
            width: w,
            height: h,
        });
    }
    Ok([x1 / w, y1 / h, x2 / w, y2 / h])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn location_examples() {
        assert_eq!(
            location_vector([10.0, 20.0, 50.0, 100.0], (100.0, 200.0)).unwrap(),
            [0.1, 0.1, 0.5, 0.5]
        );
        assert_eq!(
            location_vector([0.0, 0.0, 64.0, 48.0], (64.0, 48.0)).unwrap(),
            [0.0, 0.0, 1.0, 1.0]
        );
        assert_eq!(
            location_vector([5.0, 5.0, 5.0, 5.0], (10.0, 10.0)).unwrap(),
            [0.5, 0.5, 0.5, 0.5]
        );
    }

    #[test]
    fn location_errors() {
        assert!(matches!(
            location_vector([0.0; 4], (0.0, 10.0)),
            Err(Error::DegenerateImage { .. })
        ));
        assert!(matches!(
            location_vector([0.0, 0.0, 11.0, 5.0], (10.0, 10.0)),
            Err(Error::BoxOutsideImage { .. })
        ));
    }

    #[test]
    fn text_validation() {
        let cfg = EncoderConfig::desk(40);
        assert!(TextInput::from_words(&[7, 8]).validate(&cfg).is_ok());
        assert!(matches!(
            TextInput::from_words(&[40]).validate(&cfg),
            Err(Error::TokenOutOfRange { id: 40, .. })
        ));
        assert!(TextInput::from_words(&[5; 25]).validate(&cfg).is_err());
        let mut t = TextInput::from_words(&[5]);
        t.token_ids[0] = 9;
        assert!(t.validate(&cfg).is_err());
    }
}
