//! Ground-truth evaluation of question programs by set filtering.

use std::cmp::Ordering;

use super::question::{CompareOp, Filter, Program};
use super::{ObjectSpec, Scene};
use crate::error::{Error, Result};

/// Indices of the objects `filter` selects. A relational hop requires its
/// anchor to be unique.
pub fn matching(scene: &Scene, filter: &Filter) -> Result<Vec<usize>> {
    let anchor: Option<(_, &ObjectSpec)> = match &filter.relation {
        Some((rel, anchor)) => Some((*rel, &scene.objects[unique(scene, anchor)?])),
        None => None,
    };
    Ok(scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| filter.matches_attributes(o))
        .filter(|(_, o)| anchor.is_none_or(|(rel, a)| !std::ptr::eq(*o, a) && rel.holds(o, a)))
        .map(|(i, _)| i)
        .collect())
}

fn unique(scene: &Scene, filter: &Filter) -> Result<usize> {
    match matching(scene, filter)?.as_slice() {
        [i] => Ok(*i),
        found => Err(Error::contract(format!(
            "referent in {} matches {} objects, expected exactly one",
            scene.id,
            found.len()
        ))),
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Answer token for `program` evaluated against `scene`.
pub fn answer_oracle(scene: &Scene, program: &Program) -> Result<String> {
    Ok(match program {
        Program::Exist(f) => yes_no(!matching(scene, f)?.is_empty()),
        Program::Count(f) => matching(scene, f)?.len().to_string(),
        Program::CompareInteger { op, left, right } => {
            let ord = matching(scene, left)?.len().cmp(&matching(scene, right)?.len());
            yes_no(match op {
                CompareOp::More => ord == Ordering::Greater,
                CompareOp::Fewer => ord == Ordering::Less,
                CompareOp::Same => ord == Ordering::Equal,
            })
        }
        Program::QueryAttribute { attr, referent } => {
            scene.objects[unique(scene, referent)?].attribute_word(*attr).to_string()
        }
        Program::CompareAttribute { attr, left, right } => {
            let l = &scene.objects[unique(scene, left)?];
            let r = &scene.objects[unique(scene, right)?];
            yes_no(l.attribute_word(*attr) == r.attribute_word(*attr))
        }
    })
}
