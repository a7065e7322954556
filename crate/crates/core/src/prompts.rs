//! Versioned prompt templates. Each template is a text asset compiled into
//! the binary; its id is recorded in run traces so transcripts stay
//! attributable to the exact prompt wording that produced them.

use crate::model::{DecompositionStrategy, SqlStyle};

#[derive(Debug, Clone, Copy)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub text: &'static str,
}

impl PromptTemplate {
    /// Substitute `{name}` placeholders. Unknown placeholders are left
    /// verbatim so a missing binding is visible in transcripts instead of
    /// silently vanishing.
    pub fn render(&self, bindings: &[(&str, &str)]) -> String {
        let mut out = self.text.to_string();
        for (name, value) in bindings {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }
}

pub const KEYWORDS: PromptTemplate = PromptTemplate {
    id: "keywords.v1",
    text: include_str!("../assets/prompts/keywords_v1.txt"),
};

pub const FALLBACK_CHECK: PromptTemplate = PromptTemplate {
    id: "fallback_check.v1",
    text: include_str!("../assets/prompts/fallback_check_v1.txt"),
};

pub const DECOMPOSE_TABLE_WISE: PromptTemplate = PromptTemplate {
    id: "decompose.table_wise.v1",
    text: include_str!("../assets/prompts/decompose_table_wise_v1.txt"),
};

pub const DECOMPOSE_HIERARCHICAL: PromptTemplate = PromptTemplate {
    id: "decompose.hierarchical.v1",
    text: include_str!("../assets/prompts/decompose_hierarchical_v1.txt"),
};

pub const DECOMPOSE_ATOMIC: PromptTemplate = PromptTemplate {
    id: "decompose.atomic.v1",
    text: include_str!("../assets/prompts/decompose_atomic_v1.txt"),
};

pub const REACT_REASON: PromptTemplate = PromptTemplate {
    id: "react_reason.v1",
    text: include_str!("../assets/prompts/react_reason_v1.txt"),
};

pub const REACT_REFLECT: PromptTemplate = PromptTemplate {
    id: "react_reflect.v1",
    text: include_str!("../assets/prompts/react_reflect_v1.txt"),
};

pub const SYNTHESIZE: PromptTemplate = PromptTemplate {
    id: "synthesize.v1",
    text: include_str!("../assets/prompts/synthesize_v1.txt"),
};

pub const CRITIC: PromptTemplate = PromptTemplate {
    id: "critic.v1",
    text: include_str!("../assets/prompts/critic_v1.txt"),
};

pub const REFINE: PromptTemplate = PromptTemplate {
    id: "refine.v1",
    text: include_str!("../assets/prompts/refine_v1.txt"),
};

pub const ANNOTATE_MEMORY: PromptTemplate = PromptTemplate {
    id: "annotate_memory.v1",
    text: include_str!("../assets/prompts/annotate_memory_v1.txt"),
};

pub fn decompose_template(strategy: DecompositionStrategy) -> PromptTemplate {
    match strategy {
        DecompositionStrategy::TableWise => DECOMPOSE_TABLE_WISE,
        DecompositionStrategy::Hierarchical => DECOMPOSE_HIERARCHICAL,
        _ => DECOMPOSE_ATOMIC,
    }
}

/// Marker line rendered into synthesis prompts; scripted backends match on it.
pub fn style_marker(style: SqlStyle) -> &'static str {
    match style {
        SqlStyle::Cte => "CTE",
        SqlStyle::FlatJoin => "FlatJoin",
        SqlStyle::Nested => "Nested",
    }
}

/// Extract SQL from a fenced ```sql or ``` block; falls back to the last
/// fenced block of any language tag.
pub fn extract_fenced_sql(reply: &str) -> Option<String> {
    let mut best: Option<String> = None;
    let mut rest = reply;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = match after.find('\n') {
            Some(nl) if after[..nl].trim().len() <= 8 => nl + 1, // language tag line
            _ => 0,
        };
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                let candidate = body[..close].trim();
                if !candidate.is_empty() {
                    best = Some(candidate.to_string());
                }
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    best
}
