//! The deliberate-thinking front half: extract the question's key elements,
//! localize each with the segmentation client, and composite the surviving
//! detections onto the image.
//!
//! Every degenerate path — no keywords extracted, nothing above the box
//! threshold, a failing segmentation call — falls back to the original
//! image, byte for byte. Visual prompting must never make the input worse.

pub mod font;
pub mod overlay;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatClient, ChatRequest, Detection, GatewayError, SegmentClient};
use crate::image_ref::{encode_png, ImageError, ImageRef};

pub use overlay::OverlayStyle;

/// Version tag for the fixed extraction prompt below.
pub const EXTRACTION_PROMPT_VERSION: &str = "v1";

/// The fixed keyword-extraction prompt, sent at temperature 0.
pub fn extraction_prompt(question: &str, k_max: usize) -> String {
    format!(
        "Extract the physical objects or visual elements that must be located in an image \
         to answer this question. Reply with a comma-separated list of at most {k_max} short \
         noun phrases, or NONE if no object is named. Question: {question}"
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptualizerConfig {
    /// Upper bound on extracted keywords.
    pub k_max: usize,
    /// Minimum detection score; detections below it are discarded.
    pub box_threshold: f64,
    pub style: OverlayStyle,
}

impl Default for ConceptualizerConfig {
    fn default() -> Self {
        Self {
            k_max: 5,
            box_threshold: 0.7,
            style: OverlayStyle::default(),
        }
    }
}

/// The key elements extracted from one question. Keywords are trimmed,
/// lowercased, deduplicated, and capped at `k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub keywords: Vec<String>,
    pub source_question: String,
}

impl KeywordSet {
    pub fn empty(question: &str) -> Self {
        Self {
            keywords: Vec::new(),
            source_question: question.to_string(),
        }
    }

    /// Parse a comma-separated extraction reply. An explicit `NONE` (or a
    /// reply with no usable tokens) yields the empty set.
    pub fn parse_reply(reply: &str, question: &str, k_max: usize) -> Self {
        let trimmed = reply.trim();
        if trimmed.eq_ignore_ascii_case("none") {
            return Self::empty(question);
        }
        let mut keywords: Vec<String> = Vec::new();
        for piece in trimmed.split(',') {
            let kw = piece.trim().to_lowercase();
            if kw.is_empty() || keywords.iter().any(|k| k == &kw) {
                continue;
            }
            keywords.push(kw);
            if keywords.len() == k_max {
                break;
            }
        }
        Self {
            keywords,
            source_question: question.to_string(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }
}

/// Original image plus detection overlays. `rendered` holds the encoded
/// output: byte-identical to the input when there are no overlays, a PNG
/// re-encode otherwise.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub base: ImageRef,
    pub overlays: Vec<Detection>,
    pub rendered: Vec<u8>,
}

impl AnnotatedImage {
    /// The rendered bytes as an image handle for the follow-up chat call.
    pub fn rendered_ref(&self) -> ImageRef {
        ImageRef::from_bytes(self.rendered.clone())
    }
}

#[derive(Debug, Clone)]
pub struct KeywordExtraction {
    pub keywords: KeywordSet,
    pub latency_ms: f64,
}

/// Ask the language model for the question's key elements.
pub fn extract_keywords(
    question: &str,
    lm: &dyn ChatClient,
    k_max: usize,
) -> Result<KeywordExtraction, GatewayError> {
    let req = ChatRequest::user(extraction_prompt(question, k_max), None)
        .with_temperature(0.0)
        .with_max_tokens(64);
    let resp = lm.chat(&req)?;
    Ok(KeywordExtraction {
        keywords: KeywordSet::parse_reply(&resp.text, question, k_max),
        latency_ms: resp.latency_ms,
    })
}

/// Result of localizing a keyword set: the concatenated detections in
/// keyword order (each keyword's list already threshold-filtered and sorted
/// by descending score), plus call accounting.
#[derive(Debug, Clone, Default)]
pub struct Located {
    pub detections: Vec<Detection>,
    pub calls: usize,
    /// Max over the per-keyword call latencies (the calls are logically
    /// concurrent). Failed calls contribute 0.
    pub wall_ms: f64,
    /// One entry per failed keyword: (keyword, error description). A failing
    /// call counts as zero detections; it never aborts the pipeline.
    pub failures: Vec<(String, String)>,
}

/// One segmentation call per keyword. An empty keyword set makes no calls.
pub fn locate(
    image: &ImageRef,
    keywords: &KeywordSet,
    seg: &dyn SegmentClient,
    box_threshold: f64,
) -> Result<Located, ImageError> {
    if keywords.is_empty() {
        return Ok(Located::default());
    }
    // Undecodable images are unrecoverable; surface them before any call.
    image.dimensions()?;
    let mut out = Located::default();
    for kw in &keywords.keywords {
        out.calls += 1;
        match seg.segment(image, kw, box_threshold) {
            Ok(res) => {
                out.wall_ms = out.wall_ms.max(res.latency_ms);
                out.detections.extend(res.detections);
            }
            Err(e) => out.failures.push((kw.clone(), e.to_string())),
        }
    }
    Ok(out)
}

/// Overlay the detections onto the image. Zero detections return the input
/// bytes untouched; otherwise the output is a deterministic PNG re-encode
/// with boxes and label tags drawn in list order.
pub fn composite(
    image: &ImageRef,
    detections: Vec<Detection>,
    style: &OverlayStyle,
) -> Result<AnnotatedImage, ImageError> {
    if detections.is_empty() {
        return Ok(AnnotatedImage {
            base: image.clone(),
            overlays: detections,
            rendered: image.bytes().to_vec(),
        });
    }
    let mut pixels = image.decode()?;
    overlay::draw_detections(&mut pixels, &detections, style);
    Ok(AnnotatedImage {
        base: image.clone(),
        overlays: detections,
        rendered: encode_png(&pixels)?,
    })
}

/// Full conceptualization outcome, with the call accounting the router
/// folds into its cost ledger.
#[derive(Debug, Clone)]
pub struct Conceptualization {
    pub image: AnnotatedImage,
    pub keywords: KeywordSet,
    pub lm_calls: usize,
    pub lm_wall_ms: f64,
    pub seg_calls: usize,
    pub seg_wall_ms: f64,
    /// Human-readable degradation notes (failed extraction or segmentation
    /// calls that fell back to the original image).
    pub warnings: Vec<String>,
}

/// Extract → locate → composite, threading the fallbacks: any stage that
/// degenerates to empty leaves the image untouched. Only unrecoverable
/// image errors surface.
pub fn conceptualize(
    image: &ImageRef,
    question: &str,
    lm: &dyn ChatClient,
    seg: &dyn SegmentClient,
    cfg: &ConceptualizerConfig,
) -> Result<Conceptualization, ImageError> {
    let mut warnings = Vec::new();
    let (keywords, lm_wall_ms) = match extract_keywords(question, lm, cfg.k_max) {
        Ok(ex) => (ex.keywords, ex.latency_ms),
        Err(e) => {
            warnings.push(format!("keyword extraction failed: {e}"));
            (KeywordSet::empty(question), 0.0)
        }
    };
    let located = locate(image, &keywords, seg, cfg.box_threshold)?;
    for (kw, err) in &located.failures {
        warnings.push(format!("segmentation failed for {kw:?}: {err}"));
    }
    let image = composite(image, located.detections, &cfg.style)?;
    Ok(Conceptualization {
        image,
        keywords,
        lm_calls: 1,
        lm_wall_ms,
        seg_calls: located.calls,
        seg_wall_ms: located.wall_ms,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{
        ChatScript, MockChatBackend, MockSegmentBackend, ScriptedFailure, ScriptedResponse,
        SegScript, SegScriptEntry,
    };
    use crate::gateway::BoundingBox;
    use std::collections::HashSet;

    fn det(label: &str, bbox: BoundingBox, score: f64) -> Detection {
        Detection {
            label: label.into(),
            bbox,
            score,
        }
    }

    fn lm_replying(question: &str, k_max: usize, reply: &str) -> MockChatBackend {
        let script = ChatScript::new().on_prompt(
            &extraction_prompt(question, k_max),
            false,
            vec![ScriptedResponse::text(reply).with_latency(30.0)],
        );
        MockChatBackend::new(script).unwrap()
    }

    #[test]
    fn parse_reply_splits_and_keeps_order() {
        let ks = KeywordSet::parse_reply("jersey, number", "q", 5);
        assert_eq!(ks.keywords, ["jersey", "number"]);
    }

    #[test]
    fn parse_reply_none_is_empty() {
        assert!(KeywordSet::parse_reply("NONE", "q", 5).is_empty());
        assert!(KeywordSet::parse_reply("  none  ", "q", 5).is_empty());
    }

    #[test]
    fn parse_reply_dedups_case_insensitively_and_trims() {
        let ks = KeywordSet::parse_reply("Dog, dog , CAT", "q", 5);
        assert_eq!(ks.keywords, ["dog", "cat"]);
    }

    #[test]
    fn parse_reply_truncates_to_k_max() {
        let ks = KeywordSet::parse_reply("a, b, c, d", "q", 2);
        assert_eq!(ks.keywords, ["a", "b"]);
    }

    #[test]
    fn extract_keywords_against_mock() {
        let lm = lm_replying("what is written on the jersey?", 5, "jersey, number");
        let ex = extract_keywords("what is written on the jersey?", &lm, 5).unwrap();
        assert_eq!(ex.keywords.keywords, ["jersey", "number"]);
        assert_eq!(ex.latency_ms, 30.0);
    }

    #[test]
    fn locate_one_call_per_keyword() {
        let white = ImageRef::solid(64, 64, [255, 255, 255, 255]);
        let seg = MockSegmentBackend::new(
            SegScript::new()
                .on_prompt(
                    "dog",
                    SegScriptEntry::detections(vec![det(
                        "dog",
                        BoundingBox::new(5.0, 5.0, 20.0, 20.0),
                        0.9,
                    )])
                    .with_latency(50.0),
                )
                .on_prompt(
                    "frisbee",
                    SegScriptEntry::detections(vec![det(
                        "frisbee",
                        BoundingBox::new(30.0, 30.0, 40.0, 40.0),
                        0.8,
                    )])
                    .with_latency(70.0),
                ),
        )
        .unwrap();
        let ks = KeywordSet {
            keywords: vec!["dog".into(), "frisbee".into()],
            source_question: "q".into(),
        };
        let located = locate(&white, &ks, &seg, 0.7).unwrap();
        assert_eq!(located.calls, 2);
        assert_eq!(located.detections.len(), 2);
        assert_eq!(located.detections[0].label, "dog"); // keyword order
        assert_eq!(located.wall_ms, 70.0); // concurrent attribution: max
        assert_eq!(seg.calls_made(), 2);
    }

    #[test]
    fn locate_empty_keywords_makes_no_calls() {
        let white = ImageRef::solid(8, 8, [255, 255, 255, 255]);
        let seg = MockSegmentBackend::new(SegScript::new()).unwrap();
        let located = locate(&white, &KeywordSet::empty("q"), &seg, 0.7).unwrap();
        assert_eq!(located.calls, 0);
        assert!(located.detections.is_empty());
        assert_eq!(seg.calls_made(), 0);
    }

    #[test]
    fn locate_below_threshold_is_empty() {
        let white = ImageRef::solid(64, 64, [255, 255, 255, 255]);
        let seg = MockSegmentBackend::new(SegScript::new().on_prompt(
            "dog",
            SegScriptEntry::detections(vec![det("dog", BoundingBox::new(1.0, 1.0, 9.0, 9.0), 0.65)]),
        ))
        .unwrap();
        let ks = KeywordSet {
            keywords: vec!["dog".into()],
            source_question: "q".into(),
        };
        let located = locate(&white, &ks, &seg, 0.7).unwrap();
        assert!(located.detections.is_empty());
        assert_eq!(located.calls, 1);
    }

    #[test]
    fn locate_isolates_per_keyword_failures() {
        let white = ImageRef::solid(64, 64, [255, 255, 255, 255]);
        let seg = MockSegmentBackend::new(
            SegScript::new()
                .on_prompt("dog", SegScriptEntry::failing(ScriptedFailure::Transport))
                .on_prompt(
                    "cat",
                    SegScriptEntry::detections(vec![det(
                        "cat",
                        BoundingBox::new(1.0, 1.0, 9.0, 9.0),
                        0.9,
                    )]),
                ),
        )
        .unwrap();
        let ks = KeywordSet {
            keywords: vec!["dog".into(), "cat".into()],
            source_question: "q".into(),
        };
        let located = locate(&white, &ks, &seg, 0.7).unwrap();
        assert_eq!(located.calls, 2);
        assert_eq!(located.detections.len(), 1);
        assert_eq!(located.detections[0].label, "cat");
        assert_eq!(located.failures.len(), 1);
        assert_eq!(located.failures[0].0, "dog");
    }

    #[test]
    fn composite_zero_detections_is_byte_identical() {
        let white = ImageRef::solid(100, 100, [255, 255, 255, 255]);
        let out = composite(&white, vec![], &OverlayStyle::default()).unwrap();
        assert_eq!(out.rendered, white.bytes());
    }

    #[test]
    fn composite_is_deterministic() {
        let white = ImageRef::solid(100, 100, [255, 255, 255, 255]);
        let dets = vec![det("dog", BoundingBox::new(20.0, 20.0, 60.0, 50.0), 0.9)];
        let a = composite(&white, dets.clone(), &OverlayStyle::default()).unwrap();
        let b = composite(&white, dets, &OverlayStyle::default()).unwrap();
        assert_eq!(a.rendered, b.rendered);
        assert_ne!(a.rendered, white.bytes());
    }

    #[test]
    fn composite_changed_pixels_match_geometry_oracle() {
        let white = ImageRef::solid(100, 100, [255, 255, 255, 255]);
        let dets = vec![det("dog", BoundingBox::new(20.0, 20.0, 60.0, 50.0), 0.9)];
        let style = OverlayStyle::default();
        let out = composite(&white, dets.clone(), &style).unwrap();
        let rendered = ImageRef::from_bytes(out.rendered).decode().unwrap();

        // independent enumeration of the expected changed-pixel set
        let rect = overlay::pixel_rect(&dets[0], 100, 100).unwrap();
        let tag = overlay::label_tag_rect("dog", (rect.x0, rect.y0), 100, 100).unwrap();
        let stroke = i64::from(style.stroke_width);
        let mut expected = HashSet::new();
        for y in rect.y0..=rect.y1 {
            for x in rect.x0..=rect.x1 {
                if x - rect.x0 < stroke || rect.x1 - x < stroke || y - rect.y0 < stroke
                    || rect.y1 - y < stroke
                {
                    expected.insert((x, y));
                }
            }
        }
        for y in tag.y0..=tag.y1 {
            for x in tag.x0..=tag.x1 {
                expected.insert((x, y));
            }
        }

        let mut actual = HashSet::new();
        for y in 0..100i64 {
            for x in 0..100i64 {
                if rendered.get_pixel(x as u32, y as u32).0 != [255, 255, 255, 255] {
                    actual.insert((x, y));
                }
            }
        }
        assert_eq!(actual, expected);
    }

    #[test]
    fn conceptualize_happy_path() {
        let white = ImageRef::solid(64, 64, [255, 255, 255, 255]);
        let q = "is the dog catching the frisbee?";
        let lm = lm_replying(q, 5, "dog, frisbee");
        let seg = MockSegmentBackend::new(
            SegScript::new()
                .on_prompt(
                    "dog",
                    SegScriptEntry::detections(vec![det(
                        "dog",
                        BoundingBox::new(5.0, 5.0, 20.0, 20.0),
                        0.9,
                    )]),
                )
                .on_prompt(
                    "frisbee",
                    SegScriptEntry::detections(vec![det(
                        "frisbee",
                        BoundingBox::new(30.0, 30.0, 40.0, 40.0),
                        0.8,
                    )]),
                ),
        )
        .unwrap();
        let out = conceptualize(&white, q, &lm, &seg, &ConceptualizerConfig::default()).unwrap();
        assert_eq!(out.image.overlays.len(), 2);
        assert_eq!(out.lm_calls, 1);
        assert_eq!(out.seg_calls, 2);
        assert_ne!(out.image.rendered, white.bytes());
    }

    #[test]
    fn conceptualize_none_reply_keeps_image_and_makes_no_seg_calls() {
        let white = ImageRef::solid(64, 64, [255, 255, 255, 255]);
        let q = "why?";
        let lm = lm_replying(q, 5, "NONE");
        let seg = MockSegmentBackend::new(SegScript::new()).unwrap();
        let out = conceptualize(&white, q, &lm, &seg, &ConceptualizerConfig::default()).unwrap();
        assert_eq!(out.image.rendered, white.bytes());
        assert_eq!(out.seg_calls, 0);
        assert_eq!(seg.calls_made(), 0);
    }

    #[test]
    fn conceptualize_all_below_threshold_keeps_image() {
        let white = ImageRef::solid(64, 64, [255, 255, 255, 255]);
        let q = "where is the dog?";
        let lm = lm_replying(q, 5, "dog");
        let seg = MockSegmentBackend::new(SegScript::new().on_prompt(
            "dog",
            SegScriptEntry::detections(vec![det("dog", BoundingBox::new(1.0, 1.0, 9.0, 9.0), 0.65)]),
        ))
        .unwrap();
        let out = conceptualize(&white, q, &lm, &seg, &ConceptualizerConfig::default()).unwrap();
        assert_eq!(out.image.rendered, white.bytes());
    }

    #[test]
    fn conceptualize_lm_failure_degrades_to_original_image() {
        let white = ImageRef::solid(64, 64, [255, 255, 255, 255]);
        let q = "q";
        let lm = MockChatBackend::new(ChatScript::new().on_prompt(
            &extraction_prompt(q, 5),
            false,
            vec![ScriptedResponse::failing(ScriptedFailure::Backend)],
        ))
        .unwrap();
        let seg = MockSegmentBackend::new(SegScript::new()).unwrap();
        let out = conceptualize(&white, q, &lm, &seg, &ConceptualizerConfig::default()).unwrap();
        assert_eq!(out.image.rendered, white.bytes());
        assert_eq!(out.lm_calls, 1);
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn overlay_union_matches_scripted_survivors() {
        let white = ImageRef::solid(64, 64, [255, 255, 255, 255]);
        let q = "q";
        let lm = lm_replying(q, 5, "dog, cat");
        let seg = MockSegmentBackend::new(
            SegScript::new()
                .on_prompt(
                    "dog",
                    SegScriptEntry::detections(vec![
                        det("dog", BoundingBox::new(1.0, 1.0, 9.0, 9.0), 0.95),
                        det("dog", BoundingBox::new(2.0, 2.0, 8.0, 8.0), 0.3),
                    ]),
                )
                .on_prompt(
                    "cat",
                    SegScriptEntry::detections(vec![det(
                        "cat",
                        BoundingBox::new(20.0, 20.0, 30.0, 30.0),
                        0.8,
                    )]),
                ),
        )
        .unwrap();
        let out = conceptualize(&white, q, &lm, &seg, &ConceptualizerConfig::default()).unwrap();
        let labels: Vec<&str> = out.image.overlays.iter().map(|d| d.label.as_str()).collect();
        assert_eq!(labels, ["dog", "cat"]);
    }
}
