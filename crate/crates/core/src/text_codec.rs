//! Word-level vocabulary with reserved special and geometry id ranges, and
//! the keyword map that ties surface words back to generator labels.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Intensity, Lexicon};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const MOT_BEGIN: usize = 5;
pub const MOT_END: usize = 6;
pub const FIRST_TEXT_ID: usize = 7;

const SPECIAL_NAMES: [&str; FIRST_TEXT_ID] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>", "<mot>", "</mot>"];

/// Questions paired with motions when training and querying the
/// motion-to-language model.
pub const QUESTIONS: [&str; 5] = [
    "describe the expression and head motion",
    "what is the face doing",
    "how does this person look and move",
    "describe the facial expression and the movement of the head",
    "what emotion and head movement do you see",
];

/// Common words outside the template bank, so short hand-written prompts
/// and descriptions stay representable.
const EXTRA_WORDS: &[&str] = &[
    "a", "an", "and", "back", "broad", "but", "face", "forth", "gently", "he", "her", "his", "in", "is", "it",
    "man", "of", "person", "quickly", "she", "slowly", "stays", "the", "their", "then", "they", "very", "with",
    "woman",
];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize_words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| w.to_lowercase()).collect()
}

/// Normalized form of `s`: its words joined by single spaces.
pub fn normalize_text(s: &str) -> String {
    normalize_words(s).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    k_geometry: usize,
}

/// On-disk form: ids are implied by word order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabFile {
    pub words: Vec<String>,
    pub k_geometry: usize,
}

impl Vocabulary {
    /// Collects every word the lexicon, templates and question bank can
    /// produce, sorts them, and assigns ids after the specials.
    pub fn build(lex: &Lexicon, k_geometry: usize) -> Self {
        let mut words = BTreeSet::new();
        let mut add = |s: &str| words.extend(normalize_words(s));
        for t in &lex.templates {
            let mut rest = t.as_str();
            let mut literal = String::new();
            while let Some(open) = rest.find('{') {
                literal.push_str(&rest[..open]);
                literal.push(' ');
                rest = &rest[open + rest[open..].find('}').map_or(rest.len() - open, |c| c + 1)..];
            }
            literal.push_str(rest);
            add(&literal);
        }
        lex.subjects.iter().for_each(|s| add(s));
        for a in &lex.archetypes {
            add(&a.name);
            a.surfaces.iter().for_each(|s| add(s));
        }
        for m in &lex.motions {
            add(&m.phrase);
            m.surfaces.iter().for_each(|s| add(s));
        }
        for m in &lex.micros {
            add(&m.phrase);
        }
        add("with occasional");
        for (_, surfaces) in &lex.intensity_surfaces {
            surfaces.iter().for_each(|s| add(s));
        }
        QUESTIONS.iter().for_each(|q| add(q));
        EXTRA_WORDS.iter().for_each(|w| add(w));
        Self::from_file(VocabFile { words: words.into_iter().collect(), k_geometry })
            .expect("generated word list is valid")
    }

    pub fn from_file(file: VocabFile) -> Result<Self> {
        let mut index = HashMap::with_capacity(file.words.len());
        for (i, w) in file.words.iter().enumerate() {
            if w.is_empty() || normalize_text(w) != *w {
                return Err(Error::Corrupt { what: "vocabulary".into(), detail: format!("word {w:?} is not normalized") });
            }
            if index.insert(w.clone(), FIRST_TEXT_ID + i).is_some() {
                return Err(Error::Corrupt { what: "vocabulary".into(), detail: format!("duplicate word {w:?}") });
            }
        }
        if file.k_geometry < 2 {
            return Err(Error::Corrupt { what: "vocabulary".into(), detail: "fewer than two geometry ids".into() });
        }
        Ok(Vocabulary { words: file.words, index, k_geometry: file.k_geometry })
    }

    pub fn to_file(&self) -> VocabFile {
        VocabFile { words: self.words.clone(), k_geometry: self.k_geometry }
    }

    /// First id past the text range.
    pub fn text_size(&self) -> usize {
        FIRST_TEXT_ID + self.words.len()
    }

    pub fn k_geometry(&self) -> usize {
        self.k_geometry
    }

    /// Total number of ids across all ranges.
    pub fn size(&self) -> usize {
        self.text_size() + self.k_geometry
    }

    pub fn geometry_id(&self, token: usize) -> Result<usize> {
        if token >= self.k_geometry {
            return Err(Error::TokenOutOfRange { id: token, limit: self.k_geometry });
        }
        Ok(self.text_size() + token)
    }

    /// Maps an id back to a geometry token when it lies in the geometry range.
    pub fn as_geometry(&self, id: usize) -> Option<usize> {
        (self.text_size()..self.size()).contains(&id).then(|| id - self.text_size())
    }

    pub fn is_text(&self, id: usize) -> bool {
        (FIRST_TEXT_ID..self.text_size()).contains(&id)
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn encode_text(&self, s: &str) -> Vec<usize> {
        normalize_words(s).iter().map(|w| self.word_id(w).unwrap_or(UNK)).collect()
    }

    /// Joins the words of text ids with single spaces. Structural specials
    /// are skipped, unknown words render as `<unk>` and geometry ids as
    /// `<g{k}>`.
    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        let mut out: Vec<String> = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == UNK {
                out.push(SPECIAL_NAMES[UNK].to_string());
            } else if id < FIRST_TEXT_ID {
                continue;
            } else if id < self.text_size() {
                out.push(self.words[id - FIRST_TEXT_ID].clone());
            } else if let Some(g) = self.as_geometry(id) {
                out.push(format!("<g{g}>"));
            } else {
                return Err(Error::TokenOutOfRange { id, limit: self.size() });
            }
        }
        Ok(out.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Emotion,
    Intensity,
    Motion,
}

/// Surface word to (field, canonical label).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordMap {
    map: HashMap<String, (Field, String)>,
}

impl KeywordMap {
    pub fn from_lexicon(lex: &Lexicon) -> Result<Self> {
        let mut map = HashMap::new();
        let mut insert = |surface: &str, field: Field, label: &str| {
            match map.insert(surface.to_string(), (field, label.to_string())) {
                Some(prev) if prev != (field, label.to_string()) => Err(Error::InvalidArgument(format!(
                    "surface {surface:?} maps to both {prev:?} and ({field:?}, {label})"
                ))),
                _ => Ok(()),
            }
        };
        for a in &lex.archetypes {
            for s in &a.surfaces {
                insert(s, Field::Emotion, &a.name)?;
            }
        }
        for (i, surfaces) in &lex.intensity_surfaces {
            for s in surfaces {
                insert(s, Field::Intensity, i.name())?;
            }
        }
        for m in &lex.motions {
            for s in &m.surfaces {
                insert(s, Field::Motion, &m.name)?;
            }
        }
        Ok(KeywordMap { map })
    }

    pub fn get(&self, word: &str) -> Option<(Field, &str)> {
        self.map.get(word).map(|(f, l)| (*f, l.as_str()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Surfaces grouped by field, sorted for stable output.
    pub fn surfaces(&self) -> Vec<(String, Field, String)> {
        let mut v: Vec<_> = self.map.iter().map(|(s, (f, l))| (s.clone(), *f, l.clone())).collect();
        v.sort();
        v
    }

    /// Scans words left to right; the first hit per field wins.
    pub fn extract_keywords(&self, description: &str) -> Keywords {
        let mut k = Keywords::default();
        for w in normalize_words(description) {
            match self.get(&w) {
                Some((Field::Emotion, l)) if k.emotion.is_none() => k.emotion = Some(l.to_string()),
                Some((Field::Intensity, l)) if k.intensity.is_none() => k.intensity = Intensity::parse(l),
                Some((Field::Motion, l)) if k.motion.is_none() => k.motion = Some(l.to_string()),
                _ => {}
            }
        }
        k
    }
}

/// Labels recovered from free text; absent fields were not mentioned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keywords {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity: Option<Intensity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_lexicon, generate_clips, CorpusConfig};
    use crate::face_model::FaceModel;
    use proptest::prelude::*;

    fn setup() -> (Lexicon, Vocabulary, KeywordMap) {
        let lex = build_lexicon(16).unwrap();
        let vocab = Vocabulary::build(&lex, 512);
        let kw = KeywordMap::from_lexicon(&lex).unwrap();
        (lex, vocab, kw)
    }

    #[test]
    fn special_ids_are_fixed() {
        assert_eq!([PAD, BOS, EOS, SEP, UNK, MOT_BEGIN, MOT_END], [0, 1, 2, 3, 4, 5, 6]);
        let (_, v, _) = setup();
        assert_eq!(v.word_id(&v.words[0]), Some(FIRST_TEXT_ID));
    }

    #[test]
    fn ranges_are_contiguous_and_disjoint() {
        let (_, v, _) = setup();
        assert_eq!(v.size() - v.text_size(), 512);
        assert_eq!(v.geometry_id(0).unwrap(), v.text_size());
        assert_eq!(v.geometry_id(511).unwrap(), v.size() - 1);
        assert!(v.geometry_id(512).is_err());
        assert_eq!(v.as_geometry(v.text_size() + 3), Some(3));
        assert_eq!(v.as_geometry(v.text_size() - 1), None);
        assert!(!v.is_text(v.text_size()));
    }

    #[test]
    fn build_is_deterministic_and_sorted() {
        let (lex, v, _) = setup();
        assert_eq!(v, Vocabulary::build(&lex, 512));
        assert!(v.words.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(Vocabulary::from_file(v.to_file()).unwrap(), v);
    }

    #[test]
    fn normalization_contract() {
        let (_, v, _) = setup();
        let ids = v.encode_text("A broad grin, while nodding.");
        assert_eq!(v.decode_text(&ids).unwrap(), "a broad grin while nodding");
        assert_eq!(v.encode_text("xylophone"), vec![UNK]);
        assert_eq!(v.encode_text("Grin!"), v.encode_text("grin"));
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let (_, v, _) = setup();
        assert!(v.decode_text(&[v.size()]).is_err());
        assert_eq!(v.decode_text(&[BOS, v.text_size() + 2, EOS]).unwrap(), "<g2>");
    }

    #[test]
    fn keyword_examples() {
        let (_, _, kw) = setup();
        let k = kw.extract_keywords("a broad grin while nodding slowly");
        assert_eq!(k.emotion.as_deref(), Some("grin"));
        assert_eq!(k.motion.as_deref(), Some("nod"));
        assert_eq!(k.intensity, None);
        assert_eq!(kw.extract_keywords("the face stays neutral"), Keywords { emotion: Some("neutral".into()), ..Default::default() });
        assert_eq!(kw.extract_keywords("she smiles then frowns").emotion.as_deref(), Some("happy"));
        assert_eq!(kw.extract_keywords("slightly sad").intensity, Some(Intensity::Low));
        assert_eq!(kw.extract_keywords("intensely sad").intensity, Some(Intensity::High));
    }

    #[test]
    fn every_surface_is_in_vocabulary() {
        let (_, v, kw) = setup();
        for (s, _, _) in kw.surfaces() {
            assert!(v.word_id(&s).is_some(), "{s}");
        }
    }

    #[test]
    fn corpus_prompts_round_trip_and_recover_labels() {
        let (_, v, kw) = setup();
        let corpus =
            generate_clips(&CorpusConfig { n_clips: 288, ..CorpusConfig::default() }, &FaceModel::synthetic(1, 32, 16).unwrap()).unwrap();
        for clip in &corpus.clips {
            let p = &clip.prompt;
            for text in std::iter::once(&p.text).chain(&p.paraphrases) {
                let ids = v.encode_text(text);
                assert!(!ids.contains(&UNK), "{text}");
                assert_eq!(v.decode_text(&ids).unwrap(), normalize_text(text));
                let k = kw.extract_keywords(text);
                assert_eq!(k.emotion.as_deref(), Some(p.labels.emotion.as_str()), "{text}");
                assert_eq!(k.intensity, Some(p.labels.intensity), "{text}");
                assert_eq!(k.motion.as_deref(), Some(p.labels.motion.as_str()), "{text}");
            }
        }
        for q in QUESTIONS {
            assert!(!v.encode_text(q).contains(&UNK));
            assert_eq!(kw.extract_keywords(q), Keywords::default());
        }
    }

    proptest! {
        #[test]
        fn encode_is_pure_and_decodes_to_normal_form(words in proptest::collection::vec(0usize..200, 0..12)) {
            let (_, v, _) = setup();
            let text: Vec<String> = words.iter().map(|&i| v.words[i % v.words.len()].to_uppercase()).collect();
            let s = text.join(", ");
            let ids = v.encode_text(&s);
            prop_assert_eq!(&ids, &v.encode_text(&s));
            prop_assert_eq!(v.decode_text(&ids).unwrap(), normalize_text(&s));
        }
    }
}
