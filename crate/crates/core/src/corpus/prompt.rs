use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::templates::{OBJ, SUBJ};
use super::{CorpusError, FactTriple, RelationTemplate, Result, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum Piece {
    Text(Vec<usize>),
    Subject,
    Object,
}

/// Which context rendering to feed: X←0 keeps the true object, X←1 swaps
/// in the counterfactual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextKind {
    Original,
    Counterfactual,
}

/// A context token sequence with its slot spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendering {
    pub tokens: Vec<usize>,
    pub subject_span: Range<usize>,
    pub object_span: Range<usize>,
    /// Maximal runs of context tokens outside the subject and object spans.
    pub relation_spans: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub id: usize,
    pub relation: String,
    pub question: Vec<usize>,
    pub subject: Vec<usize>,
    pub answer: Vec<usize>,
    pub cf_answer: Vec<usize>,
    /// Accepted gold strings (object first, then aliases).
    pub golds: Vec<String>,
    pub cf_object: String,
    skeleton: Vec<Piece>,
}

impl PromptInstance {
    /// Context with an arbitrary object string in the object slot.
    pub fn render_with(&self, object: &[usize]) -> Rendering {
        let mut tokens = Vec::new();
        let mut subject_span = 0..0;
        let mut object_span = 0..0;
        for p in &self.skeleton {
            match p {
                Piece::Text(t) => tokens.extend_from_slice(t),
                Piece::Subject => {
                    let s = tokens.len();
                    tokens.extend_from_slice(&self.subject);
                    subject_span = s..tokens.len();
                }
                Piece::Object => {
                    let s = tokens.len();
                    tokens.extend_from_slice(object);
                    object_span = s..tokens.len();
                }
            }
        }
        let mut relation_spans = Vec::new();
        let mut run: Option<usize> = None;
        for i in 0..=tokens.len() {
            let outside = i < tokens.len() && !subject_span.contains(&i) && !object_span.contains(&i);
            match (outside, run) {
                (true, None) => run = Some(i),
                (false, Some(s)) => {
                    relation_spans.push(s..i);
                    run = None;
                }
                _ => {}
            }
        }
        Rendering {
            tokens,
            subject_span,
            object_span,
            relation_spans,
        }
    }

    pub fn rendering(&self, kind: ContextKind) -> Rendering {
        match kind {
            ContextKind::Original => self.render_with(&self.answer),
            ContextKind::Counterfactual => self.render_with(&self.cf_answer),
        }
    }

    pub fn context(&self, kind: ContextKind) -> Vec<usize> {
        self.rendering(kind).tokens
    }

    /// Encoder input: question followed by the chosen context, or the
    /// question alone for `None`.
    pub fn input(&self, kind: Option<ContextKind>) -> Vec<usize> {
        let mut v = self.question.clone();
        if let Some(k) = kind {
            v.extend(self.context(k));
        }
        v
    }

    /// Encoder input with an arbitrary object in the context.
    pub fn input_with(&self, object: &[usize]) -> Vec<usize> {
        let mut v = self.question.clone();
        v.extend(self.render_with(object).tokens);
        v
    }

    /// True when X←0 and X←1 have identical lengths and spans.
    pub fn is_aligned(&self) -> bool {
        self.answer.len() == self.cf_answer.len()
    }
}

fn pieces(vocab: &Vocab, template: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut rest = template;
    loop {
        let next = [(SUBJ, Piece::Subject), (OBJ, Piece::Object)]
            .into_iter()
            .filter_map(|(slot, p)| rest.find(slot).map(|i| (i, slot.len(), p)))
            .min_by_key(|(i, _, _)| *i);
        match next {
            Some((i, n, p)) => {
                let t = vocab.tokenize(&rest[..i]);
                if !t.is_empty() {
                    out.push(Piece::Text(t));
                }
                out.push(p);
                rest = &rest[i + n..];
            }
            None => {
                let t = vocab.tokenize(rest);
                if !t.is_empty() {
                    out.push(Piece::Text(t));
                }
                return out;
            }
        }
    }
}

pub fn render_prompt(
    vocab: &Vocab,
    fact: &FactTriple,
    template: &RelationTemplate,
    counterfactual: &str,
) -> Result<PromptInstance> {
    template.validate()?;
    if template.relation != fact.relation {
        return Err(CorpusError::Template(format!(
            "template for {:?} applied to a {:?} fact",
            template.relation, fact.relation
        )));
    }
    let subject = vocab.tokenize(&fact.subject);
    let answer = vocab.tokenize(&fact.object);
    let cf_answer = vocab.tokenize(counterfactual);
    if subject.is_empty() || answer.is_empty() || cf_answer.is_empty() {
        return Err(CorpusError::Instance("empty subject, object or counterfactual".into()));
    }
    if cf_answer == answer {
        return Err(CorpusError::Instance(format!(
            "counterfactual {counterfactual:?} equals the true object"
        )));
    }
    let mut question = Vec::new();
    for p in pieces(vocab, &template.query_template) {
        match p {
            Piece::Text(t) => question.extend(t),
            Piece::Subject => question.extend_from_slice(&subject),
            Piece::Object => unreachable!("validated query has no object slot"),
        }
    }
    Ok(PromptInstance {
        id: 0,
        relation: fact.relation.clone(),
        question,
        subject,
        answer,
        cf_answer,
        golds: fact.golds().map(str::to_string).collect(),
        cf_object: counterfactual.to_string(),
        skeleton: pieces(vocab, &template.context_template),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenDivision {
    Question,
    BeginOfContext,
    FirstSubject,
    MiddleSubject,
    LastSubject,
    InBetween,
    FirstObject,
    MiddleObject,
    LastObject,
    RestOfContext,
    LastToken,
}

impl TokenDivision {
    pub const ALL: [TokenDivision; 11] = [
        Self::Question,
        Self::BeginOfContext,
        Self::FirstSubject,
        Self::MiddleSubject,
        Self::LastSubject,
        Self::InBetween,
        Self::FirstObject,
        Self::MiddleObject,
        Self::LastObject,
        Self::RestOfContext,
        Self::LastToken,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Question => "question",
            Self::BeginOfContext => "begin-of-context",
            Self::FirstSubject => "first-subject",
            Self::MiddleSubject => "middle-subject",
            Self::LastSubject => "last-subject",
            Self::InBetween => "in-between",
            Self::FirstObject => "first-object",
            Self::MiddleObject => "middle-object",
            Self::LastObject => "last-object",
            Self::RestOfContext => "rest-of-context",
            Self::LastToken => "last-token",
        }
    }
}

impl fmt::Display for TokenDivision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenDivision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown token division {s:?}"))
    }
}

fn span_part(i: usize, span: &Range<usize>, parts: [TokenDivision; 3]) -> TokenDivision {
    let j = i - span.start;
    if j == 0 {
        parts[0]
    } else if j + 1 == span.len() {
        parts[2]
    } else {
        parts[1]
    }
}

/// Labels for `question_len` question tokens followed by the rendered
/// context.
///
/// Precedence: the final context token is always last-token; subject and
/// object tokens take their span labels; the remaining context tokens are
/// begin-of-context before the first span, in-between between the two spans
/// and rest-of-context after the second.
pub fn divide_rendering(question_len: usize, r: &Rendering) -> Result<Vec<TokenDivision>> {
    let n = r.tokens.len();
    let (s, o) = (&r.subject_span, &r.object_span);
    if s.is_empty() || o.is_empty() || s.end > n || o.end > n {
        return Err(CorpusError::Instance(format!(
            "spans {s:?}/{o:?} invalid for context of length {n}"
        )));
    }
    if s.start < o.end && o.start < s.end {
        return Err(CorpusError::Instance(format!(
            "subject span {s:?} overlaps object span {o:?}"
        )));
    }
    let (first, second) = if s.start < o.start { (s, o) } else { (o, s) };
    let mut out = vec![TokenDivision::Question; question_len];
    use TokenDivision as D;
    for i in 0..n {
        let d = if i + 1 == n {
            D::LastToken
        } else if s.contains(&i) {
            span_part(i, s, [D::FirstSubject, D::MiddleSubject, D::LastSubject])
        } else if o.contains(&i) {
            span_part(i, o, [D::FirstObject, D::MiddleObject, D::LastObject])
        } else if i < first.start {
            D::BeginOfContext
        } else if i < second.start {
            D::InBetween
        } else {
            D::RestOfContext
        };
        out.push(d);
    }
    Ok(out)
}

/// Division labels over the X←0 encoder input (question then context).
pub fn divide_tokens(instance: &PromptInstance) -> Result<Vec<TokenDivision>> {
    divide_rendering(
        instance.question.len(),
        &instance.rendering(ContextKind::Original),
    )
}
