//! Question templates and prompt rendering.
//!
//! Four prompt styles are supported: zero-shot, few-shot, instruction-based
//! and guided. The guided style renders the bundled template
//! `assets/guided_prompt.txt` byte-for-byte; all renderings use LF line
//! endings and end with exactly one newline.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "%s";

const GUIDED_TEMPLATE: &str = include_str!("../assets/guided_prompt.txt");

/// Version tag of the bundled guided template; bump when the asset changes.
pub const GUIDED_TEMPLATE_VERSION: u32 = 1;

const INSTRUCTION: &str = "Instruction: I want you to act as a medical question answering machine. \
I will provide you with questions and a context, and you will reply with the answers. \
If the answer is not in context, answer \"I do not know.\"";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityCategory {
    Treatment,
    Factor,
    CoexistsWith,
}

impl EntityCategory {
    /// Fixed order; also the argmax tie-break order.
    pub const ALL: [EntityCategory; 3] = [
        EntityCategory::Treatment,
        EntityCategory::Factor,
        EntityCategory::CoexistsWith,
    ];

    /// Label used on the `question_type:` line of guided prompts.
    pub fn question_type(self) -> &'static str {
        match self {
            EntityCategory::Treatment => "treat",
            EntityCategory::Factor => "factor",
            EntityCategory::CoexistsWith => "coexists_with",
        }
    }

    pub fn from_question_type(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.question_type() == label)
    }

    /// Response labels accepted for this category (lowercase).
    pub fn label_synonyms(self) -> &'static [&'static str] {
        match self {
            EntityCategory::Treatment => &["treat", "treatment", "treatments"],
            EntityCategory::Factor => &["factor", "factors"],
            EntityCategory::CoexistsWith => &["coexists_with", "coexists with", "effect", "effects"],
        }
    }

    /// Column title in reports.
    pub fn title(self) -> &'static str {
        match self {
            EntityCategory::Treatment => "Treatment",
            EntityCategory::Factor => "Factor",
            EntityCategory::CoexistsWith => "Coexists_with",
        }
    }
}

impl fmt::Display for EntityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityCategory::Treatment => "treatment",
            EntityCategory::Factor => "factor",
            EntityCategory::CoexistsWith => "coexists_with",
        })
    }
}

impl FromStr for EntityCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.to_string() == lower || c.label_synonyms().contains(&lower.as_str()))
            .ok_or_else(|| Error::Invalid(format!("unknown entity category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: String,
    pub category: EntityCategory,
    pub pattern: String,
}

impl QuestionTemplate {
    pub fn new(id: &str, category: EntityCategory, pattern: &str) -> Result<Self> {
        let t = Self {
            id: id.to_string(),
            category,
            pattern: pattern.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pattern.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::Template(format!(
                "template {} must contain `{PLACEHOLDER}` exactly once, found {n}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn instantiate(&self, disease: &str) -> String {
        self.pattern.replace(PLACEHOLDER, disease)
    }
}

// The third group is labelled "Effect" (E1-E5) in the question table and
// `coexists_with` everywhere else; both name the same category.
const DEFAULT_TEMPLATES: [(&str, EntityCategory, &str); 15] = [
    ("T1", EntityCategory::Treatment, "What can slow the progression of %s?"),
    ("T2", EntityCategory::Treatment, "What can decrease the chance of %s?"),
    ("T3", EntityCategory::Treatment, "What can reduce the risk of %s?"),
    ("T4", EntityCategory::Treatment, "What is a treatment for %s?"),
    ("T5", EntityCategory::Treatment, "What treats %s?"),
    ("F1", EntityCategory::Factor, "What does cause %s?"),
    ("F2", EntityCategory::Factor, "What is the cause of %s?"),
    ("F3", EntityCategory::Factor, "What is the factor for %s?"),
    ("F4", EntityCategory::Factor, "What can increase the risk of %s?"),
    ("F5", EntityCategory::Factor, "What can convert to %s?"),
    ("E1", EntityCategory::CoexistsWith, "What can %s convert to?"),
    ("E2", EntityCategory::CoexistsWith, "What is the effect of %s?"),
    ("E3", EntityCategory::CoexistsWith, "What does %s lead to?"),
    ("E4", EntityCategory::CoexistsWith, "What can %s become?"),
    ("E5", EntityCategory::CoexistsWith, "What does %s affect?"),
];

/// Ordered collection of question templates with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<QuestionTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES
                .iter()
                .map(|&(id, category, pattern)| QuestionTemplate {
                    id: id.to_string(),
                    category,
                    pattern: pattern.to_string(),
                })
                .collect(),
        }
    }
}

impl TemplateSet {
    pub fn templates(&self) -> &[QuestionTemplate] {
        &self.templates
    }

    pub fn for_category(&self, category: EntityCategory) -> impl Iterator<Item = &QuestionTemplate> {
        self.templates.iter().filter(move |t| t.category == category)
    }

    /// Apply overrides: an entry whose id already exists replaces it in place,
    /// other entries are appended.
    pub fn with_overrides(mut self, overrides: Vec<QuestionTemplate>) -> Result<Self> {
        for t in overrides {
            t.validate()?;
            match self.templates.iter_mut().find(|x| x.id == t.id) {
                Some(slot) => *slot = t,
                None => self.templates.push(t),
            }
        }
        Ok(self)
    }

    /// Default set extended by a JSON list of `{id, category, pattern}`.
    pub fn load_overrides(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overrides: Vec<QuestionTemplate> = serde_json::from_str(&raw)?;
        Self::default().with_overrides(overrides)
    }
}

/// `(template id, question)` for every template of `category`, in order.
pub fn instantiate_questions(
    templates: &TemplateSet,
    disease: &str,
    category: EntityCategory,
) -> Result<Vec<(String, String)>> {
    if disease.trim().is_empty() {
        return Err(Error::Invalid("disease name is empty".into()));
    }
    Ok(templates
        .for_category(category)
        .map(|t| (t.id.clone(), t.instantiate(disease)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub context: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptStyle {
    ZeroShot,
    FewShot { exemplars: Vec<Exemplar> },
    Instruct,
    Guided,
}

impl PromptStyle {
    pub fn kind(&self) -> StyleKind {
        match self {
            PromptStyle::ZeroShot => StyleKind::Zero,
            PromptStyle::FewShot { .. } => StyleKind::Few,
            PromptStyle::Instruct => StyleKind::Instruct,
            PromptStyle::Guided => StyleKind::Guided,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PromptStyle::FewShot { exemplars } if exemplars.is_empty() => {
                Err(Error::Prompt("few-shot style needs at least one exemplar".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Style without its payload; what the CLI `--style` flag names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleKind {
    Zero,
    Few,
    Instruct,
    Guided,
}

impl fmt::Display for StyleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StyleKind::Zero => "zero",
            StyleKind::Few => "few",
            StyleKind::Instruct => "instruct",
            StyleKind::Guided => "guided",
        })
    }
}

impl FromStr for StyleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(StyleKind::Zero),
            "few" => Ok(StyleKind::Few),
            "instruct" => Ok(StyleKind::Instruct),
            "guided" => Ok(StyleKind::Guided),
            other => Err(Error::Invalid(format!("unknown prompt style `{other}`"))),
        }
    }
}

/// A fully rendered backend input plus the coordinates it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub style: StyleKind,
    pub category: EntityCategory,
    pub question: String,
    #[serde(default)]
    pub question_id: String,
    #[serde(default)]
    pub disease: String,
    #[serde(default)]
    pub note_id: String,
    pub context: String,
}

impl Prompt {
    /// Hex SHA-256 of the rendered text.
    pub fn text_hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    /// Stable identifier: note, question and a short hash of the text.
    pub fn id(&self) -> String {
        format!(
            "{}:{}:{}:{}",
            self.disease,
            self.note_id,
            self.question_id,
            &self.text_hash()[..12]
        )
    }
}

fn qa_block(out: &mut String, question: &str, context: &str) {
    out.push_str("Question: ");
    out.push_str(question);
    out.push_str("\nContext: ");
    out.push_str(context);
    out.push_str("\nAnswer:");
}

/// Substitute `{{name}}` slots in one left-to-right pass; inserted values
/// are never rescanned.
fn fill_slots(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let name = &after[..close];
                match slots.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[open..open + 2 + close + 2]),
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_text(
    style: &PromptStyle,
    question: &str,
    context: &str,
    category: EntityCategory,
) -> Result<String> {
    if question.trim().is_empty() || context.trim().is_empty() {
        return Err(Error::Prompt("question and context must be non-empty".into()));
    }
    style.validate()?;
    let mut out = String::new();
    match style {
        PromptStyle::ZeroShot => qa_block(&mut out, question, context),
        PromptStyle::FewShot { exemplars } => {
            for ex in exemplars {
                qa_block(&mut out, &ex.question, &ex.context);
                out.push(' ');
                out.push_str(&ex.answer);
                out.push_str("\n\n");
            }
            qa_block(&mut out, question, context);
        }
        PromptStyle::Instruct => {
            out.push_str(INSTRUCTION);
            out.push_str("\nquestion: ");
            out.push_str(question);
            out.push_str("\ncontext: ");
            out.push_str(context);
            out.push_str("\nAnswer:");
        }
        PromptStyle::Guided => {
            out = fill_slots(
                GUIDED_TEMPLATE,
                &[
                    ("question_type", category.question_type()),
                    ("question", question),
                    ("context", context),
                ],
            );
        }
    }
    if !out.ends_with('\n') {
        out.push('\n');
    }
    Ok(out)
}

pub fn build_prompt(
    style: &PromptStyle,
    question: &str,
    context: &str,
    category: EntityCategory,
) -> Result<Prompt> {
    Ok(Prompt {
        text: render_text(style, question, context, category)?,
        style: style.kind(),
        category,
        question: question.to_string(),
        question_id: String::new(),
        disease: String::new(),
        note_id: String::new(),
        context: context.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_templates_five_per_category() {
        let set = TemplateSet::default();
        assert_eq!(set.templates().len(), 15);
        for c in EntityCategory::ALL {
            assert_eq!(set.for_category(c).count(), 5);
        }
        for t in set.templates() {
            t.validate().unwrap();
        }
    }

    #[test]
    fn instantiates_known_questions() {
        let set = TemplateSet::default();
        let t = instantiate_questions(&set, "amd", EntityCategory::Treatment).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.contains(&("T5".into(), "What treats amd?".into())));
        let f = instantiate_questions(&set, "armd", EntityCategory::Factor).unwrap();
        assert_eq!(f[3], ("F4".into(), "What can increase the risk of armd?".into()));
        assert!(instantiate_questions(&set, "", EntityCategory::Factor).is_err());
    }

    #[test]
    fn question_type_is_a_bijection() {
        for c in EntityCategory::ALL {
            assert_eq!(EntityCategory::from_question_type(c.question_type()), Some(c));
        }
        assert_eq!("effect".parse::<EntityCategory>().unwrap(), EntityCategory::CoexistsWith);
    }

    #[test]
    fn overrides_replace_and_extend() {
        let set = TemplateSet::default()
            .with_overrides(vec![
                QuestionTemplate::new("T5", EntityCategory::Treatment, "What cures %s?").unwrap(),
                QuestionTemplate::new("F6", EntityCategory::Factor, "What worsens %s?").unwrap(),
            ])
            .unwrap();
        assert_eq!(set.templates()[4].pattern, "What cures %s?");
        assert_eq!(set.for_category(EntityCategory::Factor).count(), 6);
        assert!(QuestionTemplate::new("X", EntityCategory::Factor, "no slot").is_err());
        assert!(QuestionTemplate::new("X", EntityCategory::Factor, "%s and %s").is_err());
    }

    #[test]
    fn zero_shot_keeps_question_then_context() {
        let p = build_prompt(&PromptStyle::ZeroShot, "What treats amd?", "Avastin given.", EntityCategory::Treatment)
            .unwrap();
        let qi = p.text.find("What treats amd?").unwrap();
        let ci = p.text.find("Avastin given.").unwrap();
        assert!(qi < ci);
        assert!(p.text.ends_with('\n') && !p.text.ends_with("\n\n"));
    }

    #[test]
    fn few_shot_requires_exemplars() {
        let empty = PromptStyle::FewShot { exemplars: vec![] };
        assert!(build_prompt(&empty, "q", "c", EntityCategory::Factor).is_err());
        let one = PromptStyle::FewShot {
            exemplars: vec![Exemplar {
                question: "What can slow the progression of amd?".into(),
                context: "Eat fish.".into(),
                answer: "fish".into(),
            }],
        };
        let p = build_prompt(&one, "What treats amd?", "Avastin.", EntityCategory::Treatment).unwrap();
        assert!(p.text.starts_with("Question: What can slow the progression of amd?\nContext: Eat fish.\nAnswer: fish\n\n"));
        assert!(p.text.ends_with("Question: What treats amd?\nContext: Avastin.\nAnswer:\n"));
    }

    #[test]
    fn instruct_layout() {
        let p = build_prompt(&PromptStyle::Instruct, "q?", "ctx", EntityCategory::Factor).unwrap();
        assert!(p.text.starts_with("Instruction: I want you to act as a medical question answering machine."));
        assert!(p.text.ends_with("question: q?\ncontext: ctx\nAnswer:\n"));
    }

    #[test]
    fn guided_preamble_and_labels() {
        for (cat, label) in [
            (EntityCategory::Treatment, "question_type: treat\n"),
            (EntityCategory::CoexistsWith, "question_type: coexists_with\n"),
            (EntityCategory::Factor, "question_type: factor\n"),
        ] {
            let p = build_prompt(&PromptStyle::Guided, "q?", "c", cat).unwrap();
            assert!(p.text.starts_with("You are a helpful medical knowledge extractor assistant."));
            assert!(p.text.contains(label));
            assert!(p.text.ends_with("### Response\n"));
        }
    }

    #[test]
    fn slots_are_not_rescanned() {
        let p = build_prompt(&PromptStyle::Guided, "{{context}}", "plain", EntityCategory::Factor).unwrap();
        assert!(p.text.contains("question: {{context}}\ncontext: plain\n"));
        assert!(build_prompt(&PromptStyle::Guided, " ", "c", EntityCategory::Factor).is_err());
    }

    #[test]
    fn prompt_ids_are_stable() {
        let a = build_prompt(&PromptStyle::Guided, "q?", "c", EntityCategory::Factor).unwrap();
        let b = build_prompt(&PromptStyle::Guided, "q?", "c", EntityCategory::Factor).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.id(), b.id());
        assert_eq!(a.text_hash().len(), 64);
    }
}
