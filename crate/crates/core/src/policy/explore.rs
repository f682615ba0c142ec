//! Exhaustive search over the framework's decision sequences.
//!
//! A [`ScriptedPolicy`] answers every hook invocation by picking an index
//! into [`legal_decisions`]; indices past the end of its script pick option
//! 0 (wait). [`find_schedule`] enumerates scripts depth-first, replaying each
//! against a target transcript and abandoning it at the first divergent
//! entry. Because the engine is deterministic, a script that diverged before
//! its first unscripted decision cannot be rescued by any extension, which
//! keeps the search small.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use super::{legal_decisions, CompletionInfo, Hook, LaunchInfo, Policy, PolicyDecision, PolicyError, PolicyView};
use crate::engine::{Engine, EngineError};
use crate::rational::Rational;
use crate::report::TranscriptEntry;
use crate::scenario::Scenario;

#[derive(Debug)]
pub struct ScriptedPolicy {
    script: Vec<usize>,
    tick: Option<Rational>,
    /// Number of legal options at each decision taken so far.
    options: RefCell<Vec<usize>>,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<usize>, tick: Option<Rational>) -> Self {
        ScriptedPolicy { script, tick, options: RefCell::new(Vec::new()) }
    }

    /// Option counts of the decisions made so far, in order.
    pub fn decisions(&self) -> Vec<usize> {
        self.options.borrow().clone()
    }

    fn choose(&self, view: &PolicyView<'_>, hook: Hook, launch: Option<&LaunchInfo>) -> PolicyDecision {
        let legal = legal_decisions(view, hook, launch);
        let mut options = self.options.borrow_mut();
        let pick = self.script.get(options.len()).copied().unwrap_or(0);
        options.push(legal.len());
        legal.get(pick).or(legal.first()).copied().unwrap_or(PolicyDecision::NoAction)
    }
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> &str {
        "scripted"
    }

    fn on_launch(&self, view: &PolicyView<'_>, launch: &LaunchInfo) -> Result<PolicyDecision, PolicyError> {
        Ok(self.choose(view, Hook::Launch, Some(launch)))
    }

    fn on_completion(&self, view: &PolicyView<'_>, _done: &CompletionInfo) -> Result<PolicyDecision, PolicyError> {
        Ok(self.choose(view, Hook::Completion, None))
    }

    fn on_congestion(&self, view: &PolicyView<'_>) -> Result<PolicyDecision, PolicyError> {
        Ok(self.choose(view, Hook::Congestion, None))
    }

    fn tick_period(&self) -> Option<Rational> {
        self.tick.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchOutcome {
    /// A script reproducing the target, if one was found.
    pub script: Option<Vec<usize>>,
    pub runs: usize,
    /// True if the budget ran out before the space was exhausted.
    pub truncated: bool,
}

/// Looks for a decision sequence under which `scenario` produces exactly
/// `target`. `tick` sets how often the congestion hook fires.
pub fn find_schedule(
    scenario: &Scenario,
    target: &[TranscriptEntry],
    tick: Option<Rational>,
    budget: usize,
) -> Result<SearchOutcome, EngineError> {
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    let mut runs = 0;
    while let Some(prefix) = stack.pop() {
        if runs == budget {
            return Ok(SearchOutcome { script: None, runs, truncated: true });
        }
        runs += 1;
        let policy = ScriptedPolicy::new(prefix.clone(), tick.clone());
        let result = Engine::new(scenario, &policy)?.with_expected_transcript(target.to_vec()).run();
        let options = policy.decisions();
        match result {
            Ok(_) => {
                let mut script = prefix;
                script.resize(options.len(), 0);
                return Ok(SearchOutcome { script: Some(script), runs, truncated: false });
            }
            Err(EngineError::TranscriptMismatch { .. }) => {}
            Err(e) => return Err(e),
        }
        // Every decision past the prefix defaulted to option 0; branch on
        // each of them. Deeper positions are pushed first so the search
        // stays depth-first in script order.
        for pos in (prefix.len()..options.len()).rev() {
            for choice in (1..options[pos]).rev() {
                let mut child = prefix.clone();
                child.resize(pos, 0);
                child.push(choice);
                stack.push(child);
            }
        }
    }
    Ok(SearchOutcome { script: None, runs, truncated: false })
}
