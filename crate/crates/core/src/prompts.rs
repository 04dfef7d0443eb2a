//! Descriptor and reasoner prompt assembly.
//!
//! Templates are plain UTF-8 files split into sections by `### <name>`
//! header lines. The descriptor prompt carries no per-clip content, so every
//! clip of a stream is described with a byte-identical prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DESCRIPTOR_TEMPLATE: &str = include_str!("../templates/descriptor.txt");
pub const DEFAULT_REASONER_TEMPLATE: &str = include_str!("../templates/reasoner.txt");

const MEMORY_SLOT: &str = "{memory}";
const QUESTION_SLOT: &str = "{question}";
const CANDIDATES_SLOT: &str = "{candidates}";
const DEFAULT_LAYOUT: &str = "Memory:\n{memory}\n\nQuestion: {question}\n\nOptions:\n{candidates}";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template is missing or has an empty `{0}` section")]
    MissingPart(&'static str),
    #[error("template layout: {0}")]
    Layout(String),
    #[error("expected 4 candidates, got {0}")]
    CandidateCount(usize),
    #[error("candidate {position} is labeled {found}, expected {expected}")]
    CandidateLabel { position: usize, expected: OptionLetter, found: OptionLetter },
    #[error("failed to read template {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Answer alphabet for closed-ended questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptionLetter {
    A,
    B,
    C,
    D,
}

impl OptionLetter {
    pub const ALL: [OptionLetter; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for OptionLetter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for OptionLetter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            "D" | "d" => Ok(Self::D),
            other => Err(format!("not an option letter: {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCandidate {
    pub label: OptionLetter,
    pub text: String,
}

/// Exactly four candidates in A-D order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LabeledCandidate>", into = "Vec<LabeledCandidate>")]
pub struct Candidates([String; 4]);

impl Candidates {
    pub fn new(texts: [String; 4]) -> Self {
        Self(texts)
    }

    pub fn from_labeled(labeled: Vec<LabeledCandidate>) -> Result<Self, PromptError> {
        if labeled.len() != 4 {
            return Err(PromptError::CandidateCount(labeled.len()));
        }
        for (position, (c, expected)) in labeled.iter().zip(OptionLetter::ALL).enumerate() {
            if c.label != expected {
                return Err(PromptError::CandidateLabel { position, expected, found: c.label });
            }
        }
        let mut it = labeled.into_iter().map(|c| c.text);
        Ok(Self(std::array::from_fn(|_| it.next().unwrap())))
    }

    pub fn from_texts<S: Into<String>>(texts: Vec<S>) -> Result<Self, PromptError> {
        let n = texts.len();
        let arr: [String; 4] = texts
            .into_iter()
            .map(Into::into)
            .collect::<Vec<_>>()
            .try_into()
            .map_err(|_| PromptError::CandidateCount(n))?;
        Ok(Self(arr))
    }

    pub fn get(&self, letter: OptionLetter) -> &str {
        &self.0[letter.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (OptionLetter, &str)> {
        OptionLetter::ALL.into_iter().zip(self.0.iter().map(String::as_str))
    }

    pub fn texts(&self) -> &[String; 4] {
        &self.0
    }
}

impl TryFrom<Vec<LabeledCandidate>> for Candidates {
    type Error = PromptError;

    fn try_from(v: Vec<LabeledCandidate>) -> Result<Self, Self::Error> {
        Self::from_labeled(v)
    }
}

impl From<Candidates> for Vec<LabeledCandidate> {
    fn from(c: Candidates) -> Self {
        OptionLetter::ALL
            .into_iter()
            .zip(c.0)
            .map(|(label, text)| LabeledCandidate { label, text })
            .collect()
    }
}

/// Splits `### name` sections. Text before the first header is ignored.
fn parse_sections(text: &str) -> BTreeMap<String, String> {
    let mut sections = BTreeMap::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("### ") {
            if let Some((n, body)) = current.take() {
                sections.insert(n, body.join("\n").trim().to_string());
            }
            current = Some((name.trim().to_string(), Vec::new()));
        } else if let Some((_, body)) = current.as_mut() {
            body.push(line);
        }
    }
    if let Some((n, body)) = current {
        sections.insert(n, body.join("\n").trim().to_string());
    }
    sections
}

fn read_template(path: &Path) -> Result<String, PromptError> {
    std::fs::read_to_string(path).map_err(|e| PromptError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorPromptTemplate {
    pub task_description: String,
    pub detailed_instructions: String,
    pub question_templates: Vec<String>,
    pub icl_examples: Vec<String>,
}

impl DescriptorPromptTemplate {
    /// Parses a template file body. `question_templates` has one question per
    /// non-empty line; `icl_examples` are separated by `---` lines.
    pub fn parse(text: &str) -> Self {
        let mut s = parse_sections(text);
        let mut take = |k: &str| s.remove(k).unwrap_or_default();
        let task_description = take("task_description");
        let detailed_instructions = take("detailed_instructions");
        let question_templates = take("question_templates")
            .lines()
            .map(|l| l.trim().trim_start_matches("- ").trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let icl_examples = take("icl_examples")
            .split("\n---")
            .map(|e| e.trim().trim_start_matches("---").trim().to_string())
            .filter(|e| !e.is_empty())
            .collect();
        Self { task_description, detailed_instructions, question_templates, icl_examples }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let tpl = Self::parse(&read_template(path.as_ref())?);
        tpl.validate()?;
        Ok(tpl)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.task_description.trim().is_empty() {
            return Err(PromptError::MissingPart("task_description"));
        }
        if self.detailed_instructions.trim().is_empty() {
            return Err(PromptError::MissingPart("detailed_instructions"));
        }
        if self.question_templates.iter().all(|q| q.trim().is_empty()) {
            return Err(PromptError::MissingPart("question_templates"));
        }
        if self.icl_examples.iter().all(|e| e.trim().is_empty()) {
            return Err(PromptError::MissingPart("icl_examples"));
        }
        Ok(())
    }
}

impl Default for DescriptorPromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_DESCRIPTOR_TEMPLATE)
    }
}

/// Renders the four template parts in fixed order: task, instructions,
/// anticipated questions, worked example.
pub fn build_descriptor_prompt(tpl: &DescriptorPromptTemplate) -> Result<String, PromptError> {
    tpl.validate()?;
    let mut out = String::new();
    out.push_str(tpl.task_description.trim());
    out.push_str("\n\nInstructions:\n");
    out.push_str(tpl.detailed_instructions.trim());
    out.push_str("\n\nLater I may ask questions like these, so include the details needed to answer them:\n");
    for q in &tpl.question_templates {
        out.push_str("- ");
        out.push_str(q.trim());
        out.push('\n');
    }
    let many = tpl.icl_examples.len() > 1;
    for (i, ex) in tpl.icl_examples.iter().enumerate() {
        if many {
            out.push_str(&format!("\nExample description {}:\n", i + 1));
        } else {
            out.push_str("\nExample description:\n");
        }
        out.push_str(ex.trim());
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerPromptTemplate {
    pub preamble: String,
    /// Body with `{memory}`, `{question}` and `{candidates}` placeholders, in that order.
    pub layout: String,
    pub output_instruction: String,
}

impl ReasonerPromptTemplate {
    pub fn parse(text: &str) -> Self {
        let mut s = parse_sections(text);
        let layout = s.remove("layout").filter(|l| !l.is_empty()).unwrap_or_else(|| DEFAULT_LAYOUT.to_string());
        Self {
            preamble: s.remove("preamble").unwrap_or_default(),
            layout,
            output_instruction: s.remove("output_instruction").unwrap_or_default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let tpl = Self::parse(&read_template(path.as_ref())?);
        tpl.validate()?;
        Ok(tpl)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.output_instruction.trim().is_empty() {
            return Err(PromptError::MissingPart("output_instruction"));
        }
        let mut prev = 0;
        for slot in [MEMORY_SLOT, QUESTION_SLOT, CANDIDATES_SLOT] {
            let matches: Vec<usize> = self.layout.match_indices(slot).map(|(i, _)| i).collect();
            match matches.as_slice() {
                [i] if *i >= prev => prev = *i,
                [_] => return Err(PromptError::Layout(format!("{slot} is out of order"))),
                [] => return Err(PromptError::Layout(format!("{slot} is missing"))),
                _ => return Err(PromptError::Layout(format!("{slot} appears more than once"))),
            }
        }
        Ok(())
    }
}

impl Default for ReasonerPromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_REASONER_TEMPLATE)
    }
}

pub fn render_candidates(candidates: &Candidates) -> String {
    candidates
        .iter()
        .map(|(l, t)| format!("{l}. {t}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Memory text, then question, then candidates A-D, then the output instruction.
/// Slots are filled in a single left-to-right pass so placeholder-like text
/// inside the memory or question is never re-expanded.
pub fn build_reasoner_prompt(
    tpl: &ReasonerPromptTemplate,
    memory_text: &str,
    question: &str,
    candidates: &Candidates,
) -> Result<String, PromptError> {
    tpl.validate()?;
    let rendered_candidates = render_candidates(candidates);
    let mut body = String::with_capacity(tpl.layout.len() + memory_text.len() + 256);
    let mut rest = tpl.layout.as_str();
    for (slot, value) in [
        (MEMORY_SLOT, memory_text),
        (QUESTION_SLOT, question),
        (CANDIDATES_SLOT, rendered_candidates.as_str()),
    ] {
        let at = rest.find(slot).expect("validated layout");
        body.push_str(&rest[..at]);
        body.push_str(value);
        rest = &rest[at + slot.len()..];
    }
    body.push_str(rest);

    let mut out = String::new();
    if !tpl.preamble.trim().is_empty() {
        out.push_str(tpl.preamble.trim());
        out.push_str("\n\n");
    }
    out.push_str(body.trim_end());
    out.push_str("\n\n");
    out.push_str(tpl.output_instruction.trim());
    Ok(out)
}

/// Same as [`build_reasoner_prompt`] but takes an arbitrary labeled list and
/// enforces the A-D contract first.
pub fn build_reasoner_prompt_labeled(
    tpl: &ReasonerPromptTemplate,
    memory_text: &str,
    question: &str,
    candidates: Vec<LabeledCandidate>,
) -> Result<String, PromptError> {
    let candidates = Candidates::from_labeled(candidates)?;
    build_reasoner_prompt(tpl, memory_text, question, &candidates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands() -> Candidates {
        Candidates::from_texts(vec!["on the sofa", "on the table", "in the car", "in the fridge"]).unwrap()
    }

    #[test]
    fn default_descriptor_prompt_has_four_parts_in_order() {
        let tpl = DescriptorPromptTemplate::default();
        let p = build_descriptor_prompt(&tpl).unwrap();
        let idx = [
            p.find(&tpl.task_description).unwrap(),
            p.find(&tpl.detailed_instructions).unwrap(),
            p.find(&tpl.question_templates[0]).unwrap(),
            p.find(&tpl.icl_examples[0]).unwrap(),
        ];
        assert!(idx.windows(2).all(|w| w[0] < w[1]), "{idx:?}");
    }

    #[test]
    fn descriptor_prompt_is_identical_across_calls() {
        let tpl = DescriptorPromptTemplate::default();
        assert_eq!(build_descriptor_prompt(&tpl).unwrap(), build_descriptor_prompt(&tpl).unwrap());
    }

    #[test]
    fn empty_icl_examples_is_a_configuration_error() {
        let mut tpl = DescriptorPromptTemplate::default();
        tpl.icl_examples.clear();
        assert_eq!(build_descriptor_prompt(&tpl), Err(PromptError::MissingPart("icl_examples")));
    }

    #[test]
    fn missing_section_in_file_names_the_part() {
        let tpl = DescriptorPromptTemplate::parse("### task_description\nx\n### icl_examples\ny\n### question_templates\nq?");
        assert_eq!(tpl.validate(), Err(PromptError::MissingPart("detailed_instructions")));
    }

    #[test]
    fn multiple_icl_examples_split_on_rule() {
        let tpl = DescriptorPromptTemplate::parse(
            "### task_description\nt\n### detailed_instructions\ni\n### question_templates\n- q1\n- q2\n### icl_examples\nfirst\n---\nsecond\n",
        );
        assert_eq!(tpl.question_templates, vec!["q1", "q2"]);
        assert_eq!(tpl.icl_examples, vec!["first", "second"]);
    }

    #[test]
    fn reasoner_prompt_with_empty_memory() {
        let tpl = ReasonerPromptTemplate::default();
        let p = build_reasoner_prompt(&tpl, "", "Where are my keys?", &cands()).unwrap();
        assert!(p.contains("Where are my keys?"));
        assert!(p.ends_with(tpl.output_instruction.trim()));
    }

    #[test]
    fn reasoner_prompt_orders_sections() {
        let tpl = ReasonerPromptTemplate::default();
        let p = build_reasoner_prompt(&tpl, "MEMORY-TEXT", "QUESTION-TEXT", &cands()).unwrap();
        let m = p.find("MEMORY-TEXT").unwrap();
        let q = p.find("QUESTION-TEXT").unwrap();
        let a = p.find("A. on the sofa").unwrap();
        let d = p.find("D. in the fridge").unwrap();
        let o = p.find(tpl.output_instruction.trim()).unwrap();
        assert!(m < q && q < a && a < d && d < o);
    }

    #[test]
    fn placeholder_text_inside_memory_is_not_expanded() {
        let tpl = ReasonerPromptTemplate::default();
        let p = build_reasoner_prompt(&tpl, "I wrote {question} on a note", "Q?", &cands()).unwrap();
        assert!(p.contains("I wrote {question} on a note"));
    }

    #[test]
    fn out_of_order_labels_are_rejected() {
        let labeled = [OptionLetter::B, OptionLetter::A, OptionLetter::D, OptionLetter::C]
            .into_iter()
            .map(|label| LabeledCandidate { label, text: "x".into() })
            .collect();
        let err = build_reasoner_prompt_labeled(&ReasonerPromptTemplate::default(), "", "q", labeled).unwrap_err();
        assert!(matches!(err, PromptError::CandidateLabel { position: 0, .. }));
    }

    #[test]
    fn wrong_candidate_count_is_rejected() {
        assert_eq!(Candidates::from_texts(vec!["a", "b", "c"]), Err(PromptError::CandidateCount(3)));
    }

    #[test]
    fn layout_with_swapped_slots_is_rejected() {
        let tpl = ReasonerPromptTemplate {
            layout: "{question}\n{memory}\n{candidates}".into(),
            ..Default::default()
        };
        assert!(matches!(tpl.validate(), Err(PromptError::Layout(_))));
    }
}
