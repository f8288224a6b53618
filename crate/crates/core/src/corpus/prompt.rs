use rand::seq::SliceRandom;
use rand::Rng;

use super::lexicon::Lexicon;
use super::{ClipLabels, PromptRecord};
use crate::error::{Error, Result};

pub const MIN_PARAPHRASES: usize = 3;

/// Fills one randomly chosen template for the main text and three other,
/// distinct templates for the paraphrases.
pub fn render_prompt<R: Rng + ?Sized>(lex: &Lexicon, labels: &ClipLabels, clip_id: &str, rng: &mut R) -> Result<PromptRecord> {
    let emotion = lex
        .archetype(&labels.emotion)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown emotion {:?}", labels.emotion)))?;
    let motion = lex
        .motion(&labels.motion)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown head motion {:?}", labels.motion)))?;
    let mut micro_phrases = Vec::with_capacity(labels.micro.len());
    for name in &labels.micro {
        let m = lex.micro(name).ok_or_else(|| Error::InvalidArgument(format!("unknown micro-expression {name:?}")))?;
        micro_phrases.push(m.phrase.as_str());
    }
    let micro = match micro_phrases.as_slice() {
        [] => String::new(),
        [one] => format!(" with occasional {one}"),
        [init @ .., last] => format!(" with occasional {} and {last}", init.join(", ")),
    };
    let fill = |template: &str| {
        template
            .replace("{Subject}", &capitalize(&labels.subject))
            .replace("{subject}", &labels.subject)
            .replace("{intensity}", lex.intensity_word(labels.intensity))
            .replace("{emotion}", &emotion.surfaces[0])
            .replace("{motion}", &motion.phrase)
            .replace("{micro}", &micro)
    };

    let mut order: Vec<usize> = (0..lex.templates.len()).collect();
    order.shuffle(rng);
    let text = fill(&lex.templates[order[0]]);
    let paraphrases = order[1..=MIN_PARAPHRASES].iter().map(|&i| fill(&lex.templates[i])).collect();
    Ok(PromptRecord { clip_id: clip_id.to_string(), text, paraphrases, labels: labels.clone() })
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
