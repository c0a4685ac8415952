//! Prompt rendering and token-budget fitting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::IoExample;
use crate::error::{Error, Result};

pub const INPUT_SLOT: &str = "{input_expr}";
pub const EXPECTED_SLOT: &str = "{expected_expr}";

/// Counts tokens the way the target model would.
pub trait TokenCounter {
    fn count_tokens(&self, text: &str) -> Result<usize>;
}

/// Whitespace-delimited units; the mock tokenizer.
pub fn whitespace_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// The template that turns a description and an example list into prompt
/// text. With no examples the rendering is exactly
/// `preamble + description + suffix`; otherwise `examples_header` follows the
/// description and the formatted examples are joined by `example_separator`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub preamble: String,
    pub examples_header: String,
    /// Pattern containing `{input_expr}` and `{expected_expr}`.
    pub example_format: String,
    pub example_separator: String,
    pub suffix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            preamble: String::new(),
            examples_header: "\n\nExamples:\n".into(),
            example_format: format!("{INPUT_SLOT} == {EXPECTED_SLOT}"),
            example_separator: "\n".into(),
            suffix: "\n".into(),
        }
    }
}

impl PromptTemplate {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let template: PromptTemplate = serde_json::from_str(raw.trim()).map_err(|e| Error::Parse {
            line: e.line(),
            field: "<template>".into(),
            message: e.to_string(),
        })?;
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.example_format.contains(INPUT_SLOT) || !self.example_format.contains(EXPECTED_SLOT) {
            return Err(Error::Config(format!(
                "example_format must contain {INPUT_SLOT} and {EXPECTED_SLOT}"
            )));
        }
        Ok(())
    }

    /// Renders one example. Slots are substituted in a single left-to-right
    /// pass, so slot-like text inside the example itself is never expanded.
    pub fn render_example(&self, example: &IoExample) -> String {
        let mut out = String::with_capacity(self.example_format.len() + 32);
        let mut rest = self.example_format.as_str();
        loop {
            let next_in = rest.find(INPUT_SLOT);
            let next_ex = rest.find(EXPECTED_SLOT);
            let (pos, slot, value) = match (next_in, next_ex) {
                (Some(i), Some(e)) if i < e => (i, INPUT_SLOT, &example.input_expr),
                (Some(_), Some(e)) => (e, EXPECTED_SLOT, &example.expected_expr),
                (Some(i), None) => (i, INPUT_SLOT, &example.input_expr),
                (None, Some(e)) => (e, EXPECTED_SLOT, &example.expected_expr),
                (None, None) => break,
            };
            out.push_str(&rest[..pos]);
            out.push_str(value);
            rest = &rest[pos + slot.len()..];
        }
        out.push_str(rest);
        out
    }

    /// Just the example block: formatted examples joined by the separator.
    pub fn render_examples(&self, examples: &[IoExample]) -> String {
        examples
            .iter()
            .map(|ex| self.render_example(ex))
            .collect::<Vec<_>>()
            .join(&self.example_separator)
    }
}

pub fn render_prompt(template: &PromptTemplate, nl: &str, examples: &[IoExample]) -> String {
    let mut out = String::new();
    out.push_str(&template.preamble);
    out.push_str(nl);
    if !examples.is_empty() {
        out.push_str(&template.examples_header);
        out.push_str(&template.render_examples(examples));
    }
    out.push_str(&template.suffix);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountScope {
    ExamplesOnly,
    WholePrompt,
}

impl std::str::FromStr for CountScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "examples_only" => Ok(CountScope::ExamplesOnly),
            "whole_prompt" => Ok(CountScope::WholePrompt),
            other => Err(Error::Config(format!("unknown count scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// `None` is unbounded.
    pub max_tokens: Option<usize>,
    pub scope: CountScope,
}

impl BudgetSpec {
    pub fn unbounded() -> Self {
        Self {
            max_tokens: None,
            scope: CountScope::ExamplesOnly,
        }
    }

    pub fn tokens(max_tokens: usize, scope: CountScope) -> Self {
        Self {
            max_tokens: Some(max_tokens),
            scope,
        }
    }
}

/// Token cost of `examples` rendered under `template` for the given scope.
pub fn rendered_cost<C: TokenCounter + ?Sized>(
    examples: &[IoExample],
    nl: &str,
    template: &PromptTemplate,
    scope: CountScope,
    counter: &C,
) -> Result<usize> {
    match scope {
        CountScope::ExamplesOnly => counter.count_tokens(&template.render_examples(examples)),
        CountScope::WholePrompt => counter.count_tokens(&render_prompt(template, nl, examples)),
    }
}

/// Longest prefix of `ranked` whose rendered cost stays within the budget.
/// Stops at the first overflowing prefix; later, cheaper examples are never
/// pulled forward.
///
/// With `whole_prompt` scope a description that alone exceeds the budget is
/// a domain error, since no selection can satisfy it.
pub fn fit_to_budget<C: TokenCounter + ?Sized>(
    ranked: &[IoExample],
    nl: &str,
    template: &PromptTemplate,
    budget: &BudgetSpec,
    counter: &C,
) -> Result<Vec<IoExample>> {
    let Some(max_tokens) = budget.max_tokens else {
        return Ok(ranked.to_vec());
    };
    if budget.scope == CountScope::WholePrompt {
        let base = rendered_cost(&[], nl, template, budget.scope, counter)?;
        if base > max_tokens {
            return Err(Error::domain(format!(
                "prompt without examples costs {base} tokens, over the budget of {max_tokens}"
            )));
        }
    }
    let mut keep = 0;
    for k in 1..=ranked.len() {
        if rendered_cost(&ranked[..k], nl, template, budget.scope, counter)? > max_tokens {
            break;
        }
        keep = k;
    }
    Ok(ranked[..keep].to_vec())
}
