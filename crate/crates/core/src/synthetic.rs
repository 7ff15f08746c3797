//! Synthetic class sets with a complete fixture LLM table.
//!
//! Classes sharing an object form a group: their initial answers share three
//! of four feature lines, so they cluster together under any text encoder
//! that maps equal strings to equal vectors. Comparative answers are unique
//! per class.

use std::collections::HashMap;

use crate::llm;

const VERBS: &[&str] = &[
    "ride", "feed", "wash", "hold", "hug", "pet", "walk", "carry", "kick", "throw", "lift",
    "push",
];
const OBJECTS: &[&str] = &[
    "horse", "dog", "bicycle", "ball", "cat", "boat", "kite", "umbrella", "bench", "cup",
];

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub names: Vec<String>,
    /// Class ids per group, ascending.
    pub groups: Vec<Vec<usize>>,
    /// Prompt -> answer for every prompt the builder issues when clustering
    /// recovers `groups`, under either comparison strategy.
    pub fixture: HashMap<String, String>,
}

pub fn initial_answer(verb: &str, object: &str) -> String {
    format!(
        "- a person next to a {object}\n\
         - the {object} fully in view\n\
         - hands reaching toward the {object}\n\
         - posture typical of {verb} {object}"
    )
}

pub fn summary_answer(object: &str) -> String {
    format!("People interacting with a {object} in different ways.")
}

pub fn compare_answer(verb: &str, object: &str) -> String {
    format!(
        "- the {verb} motion sets this apart from other {object} interactions\n\
         - telltale cue of {verb} {object}"
    )
}

/// `num_groups` groups of `per_group` classes each.
pub fn grouped_task(num_groups: usize, per_group: usize) -> SyntheticTask {
    assert!(num_groups <= OBJECTS.len() && per_group <= VERBS.len());
    let mut names = Vec::new();
    let mut groups = Vec::new();
    let mut fixture = HashMap::new();
    for &object in &OBJECTS[..num_groups] {
        let start = names.len();
        let group_names: Vec<String> = VERBS[..per_group]
            .iter()
            .map(|v| format!("{v} {object}"))
            .collect();
        let refs: Vec<&str> = group_names.iter().map(String::as_str).collect();
        let summary = summary_answer(object);
        fixture.insert(llm::summarize_prompt(&refs), summary.clone());
        for (i, &verb) in VERBS[..per_group].iter().enumerate() {
            let name = refs[i];
            fixture.insert(llm::initial_prompt(name), initial_answer(verb, object));
            let compare = compare_answer(verb, object);
            fixture.insert(llm::summary_compare_prompt(name, &summary), compare.clone());
            let others: Vec<&str> = refs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, n)| *n)
                .collect();
            fixture.insert(llm::direct_compare_prompt(name, &others), compare);
        }
        names.extend(group_names);
        groups.push((start..names.len()).collect());
    }
    SyntheticTask {
        names,
        groups,
        fixture,
    }
}
