use crate::prompts::OptionLetter;

const WRAPPING: &[char] = &['(', ')', '[', ']', '{', '}', '.', ':', ',', ';', '!', '?', '\'', '"', '`', '*'];

/// Reads an option letter out of raw model output. Accepts a single A-D
/// letter in either case, optionally wrapped in whitespace and punctuation
/// ("B", "b)", " (C) "). Anything else is unparseable and yields `None`.
pub fn parse_answer(raw: &str) -> Option<OptionLetter> {
    let core = raw.trim_matches(|c: char| c.is_whitespace() || WRAPPING.contains(&c));
    let mut chars = core.chars();
    let c = chars.next()?;
    if chars.next().is_some() {
        return None;
    }
    match c.to_ascii_uppercase() {
        'A' => Some(OptionLetter::A),
        'B' => Some(OptionLetter::B),
        'C' => Some(OptionLetter::C),
        'D' => Some(OptionLetter::D),
        _ => None,
    }
}
