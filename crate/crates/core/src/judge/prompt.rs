// SPDX-License-Identifier: MIT OR Apache-2.0

//! Judge prompt construction and response parsing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::evidence::LatentEvidence;
use crate::error::{Error, Result};

pub const MIN_SCALE: u8 = 0;
pub const MAX_SCALE: u8 = 4;

const SYSTEM_TEMPLATE: &str = include_str!("prompts/system.txt");

/// Few-shot blocks in prompt order. The first is the published broadcasting
/// example; the other three are constructed analogs in the same format.
const FEW_SHOT: [&str; 4] = [
    include_str!("prompts/example_broadcasting.txt"),
    include_str!("prompts/example_nursing.txt"),
    include_str!("prompts/example_pronouns.txt"),
    include_str!("prompts/example_cooking.txt"),
];

const REAL_TASK_HEADER: &str = "Okay, now here's the real task.";
const CLASSES_PREFIX: &str = "As a reminder, we only want to use these classes: ";
const PROMOTED_PREFIX: &str = "Promoted tokens: ";

/// A chat prompt: system message plus one user message holding the few-shot
/// examples and the real task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePrompt {
    pub system: String,
    pub user: String,
}

impl JudgePrompt {
    /// The full prompt as one text (system, blank line, user).
    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }

    /// Hex SHA-256 of [`JudgePrompt::text`]; used as the cache key.
    pub fn cache_key(&self) -> String {
        hex::encode(Sha256::digest(self.text().as_bytes()))
    }

    /// The real-task section of the user message.
    pub fn real_task(&self) -> &str {
        self.user.rfind(REAL_TASK_HEADER).map_or("", |i| &self.user[i..])
    }
}

/// Render the judge prompt for one latent.
pub fn build_judge_prompt(evidence: &LatentEvidence, concepts: &[String]) -> JudgePrompt {
    let concept_list = concepts.join(", ");
    let system = SYSTEM_TEMPLATE
        .trim_end_matches('\n')
        .replace("{concepts}", &concept_list)
        .replace("{min_scale}", &MIN_SCALE.to_string())
        .replace("{max_scale}", &MAX_SCALE.to_string());

    let mut user = String::new();
    for block in FEW_SHOT {
        user.push_str(block.trim_end_matches('\n'));
        user.push_str("\n\n");
    }
    user.push_str(REAL_TASK_HEADER);
    user.push('\n');
    user.push_str(CLASSES_PREFIX);
    user.push_str(&concept_list);
    user.push('\n');
    if !evidence.promoted_tokens.is_empty() {
        user.push_str(PROMOTED_PREFIX);
        user.push_str(&evidence.promoted_tokens.join(", "));
        user.push('\n');
    }
    user.push_str("Example prompts: \n");
    for (i, ctx) in evidence.top_contexts.iter().enumerate() {
        user.push_str(&format!("\nExample {}: {}\n", i + 1, ctx.render()));
    }
    user.push_str("\nChain of thought:");
    JudgePrompt { system, user }
}

/// Concepts, highlighted tokens (activation > 0) and promoted tokens read
/// back from a prompt's real-task section.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RealTask {
    pub concepts: Vec<String>,
    pub highlighted: Vec<String>,
    pub promoted: Vec<String>,
}

pub fn parse_real_task(prompt: &JudgePrompt) -> RealTask {
    let mut task = RealTask::default();
    for line in prompt.real_task().lines() {
        if let Some(rest) = line.strip_prefix(CLASSES_PREFIX) {
            task.concepts = split_list(rest);
        } else if let Some(rest) = line.strip_prefix(PROMOTED_PREFIX) {
            task.promoted = split_list(rest);
        } else {
            let mut s = line;
            while let Some(open) = s.find("<<") {
                let Some(close) = s[open..].find(">>(") else { break };
                let tok = &s[open + 2..open + close];
                let after = &s[open + close + 3..];
                let Some(end) = after.find(')') else { break };
                if after[..end].parse::<u32>().is_ok_and(|n| n > 0) {
                    task.highlighted.push(tok.to_owned());
                }
                s = &after[end..];
            }
        }
    }
    task
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|t| t.trim().to_owned())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Extract the last JSON object in `text` and read one 0..=4 integer score
/// per concept from it. Keys not in `concepts` are ignored.
pub fn parse_judge_response(text: &str, concepts: &[String]) -> Result<BTreeMap<String, u8>> {
    let object = text
        .match_indices('{')
        .rev()
        .find_map(|(i, _)| {
            let mut values = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
            match values.next() {
                Some(Ok(serde_json::Value::Object(map))) => Some(map),
                _ => None,
            }
        })
        .ok_or_else(|| Error::Parse("response contains no JSON object".into()))?;
    let mut scores = BTreeMap::new();
    for concept in concepts {
        let value = object
            .get(concept)
            .ok_or_else(|| Error::Parse(format!("no score for concept {concept:?}")))?;
        let score = value
            .as_u64()
            .filter(|s| *s <= u64::from(MAX_SCALE))
            .ok_or_else(|| Error::Parse(format!("score {value} for {concept:?} is not an integer in 0..=4")))?;
        scores.insert(concept.clone(), score as u8);
    }
    Ok(scores)
}
