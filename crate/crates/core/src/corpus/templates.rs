use serde::{Deserialize, Serialize};

use super::{CorpusError, Result};

pub const SUBJ: &str = "[subj]";
pub const OBJ: &str = "[obj]";

/// Per-relation query and context templates with `[subj]`/`[obj]` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub relation: String,
    pub query_template: String,
    pub context_template: String,
}

impl RelationTemplate {
    pub fn new(relation: &str, query: &str, context: &str) -> Self {
        Self {
            relation: relation.into(),
            query_template: query.into(),
            context_template: context.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let count = |s: &str, slot: &str| s.matches(slot).count();
        let q = &self.query_template;
        let c = &self.context_template;
        if count(q, SUBJ) != 1 || count(q, OBJ) != 0 {
            return Err(CorpusError::Template(format!(
                "{}: query template needs exactly one {SUBJ} and no {OBJ}: {q:?}",
                self.relation
            )));
        }
        if count(c, SUBJ) != 1 || count(c, OBJ) != 1 {
            return Err(CorpusError::Template(format!(
                "{}: context template needs exactly one {SUBJ} and one {OBJ}: {c:?}",
                self.relation
            )));
        }
        Ok(())
    }
}

/// The 27 relation templates of the PopQA/PEQ-style probe set.
///
/// P36 uses a capital-of query so its question matches its context.
pub fn standard_templates() -> Vec<RelationTemplate> {
    [
        ("capital", "What is the capital of [subj] ?", "The capital of [subj] is [obj]."),
        ("capital of", "What is [subj] the capital of ?", "[subj] is the capital of [obj]."),
        ("color", "What color is [subj] ?", "The color of [subj] is [obj]."),
        ("composer", "Who was the composer of [subj] ?", "[obj] was the composer of the musical work [subj]."),
        ("country", "In what country is [subj] ?", "The [subj] is located in [obj]."),
        ("father", "Who is the father of [subj] ?", "[obj] is the father of [subj]."),
        ("genre", "What genre is [subj]?", "The work titled [subj] belongs to the [obj] genre."),
        ("occupation", "What is [subj]'s occupation ?", "The occupation of [subj] is [obj]."),
        ("place of birth", "In what city was [subj] born ?", "[subj] was born in the city of [obj]."),
        ("religion", "What is the religion of [subj] ?", "[subj] practices the [obj] religion."),
        ("sport", "What sport does [subj] play ?", "The [subj] team plays the sport of [obj]."),
        ("P17", "Which country is [subj] located in ?", "[subj] is located in the country of [obj]."),
        ("P19", "Where was [subj] born ?", "According to records, [subj] was born in [obj]."),
        ("P20", "Where did [subj] die ?", "[subj] passed away in [obj]."),
        ("P36", "Which city is the capital of [subj] ?", "According to records, the capital of [subj] is [obj]."),
        ("P69", "Where was [subj] educated ?", "[subj] received their education at [obj]."),
        ("P106", "What kind of work does [subj] do ?", "[subj] is employed as a [obj] according to structured data."),
        ("P127", "Who owns [subj] ?", "[subj] is owned by [obj]."),
        ("P131", "Where is [subj] located ?", "[subj] is located in [obj]."),
        ("P159", "Where is the headquarter of [subj] ?", "The headquarters of [subj] is located in [obj]."),
        ("P175", "Who performed [subj] ?", "[obj] performed the song [subj]."),
        ("P176", "Which company is [subj] produced by ?", "The [subj] is produced by the company [obj]."),
        ("P276", "Where is [subj] located ?", "The [subj] took place in [obj]."),
        ("P407", "Which language was [subj] written in ?", "[subj] was written in the [obj] language."),
        ("P413", "What position does [subj] play ?", "[subj] plays in the position of [obj]."),
        ("P495", "Which country was [subj] created in ?", "[subj] was created in [obj]."),
        ("P740", "Where was [subj] founded ?", "[subj] was founded in [obj]."),
    ]
    .into_iter()
    .map(|(r, q, c)| RelationTemplate::new(r, q, c))
    .collect()
}
