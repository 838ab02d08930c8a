//! The human-steered LLM: wraps one agent step (candidate generation) with
//! optional pre-inference and post-inference decision points.

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::Value;

use super::{
    record_feedback, DeadlinePolicy, FeedbackContext, GuidanceAction, GuidanceDecision, GuidancePayload,
    GuidanceRequest, HitlError, HumanChannel, Phase,
};
use crate::agents::{generate_candidates, AgentError, AgentSpec, Candidate, ChatBackend, FeedbackItem, PromptBundle, EMPTY_SEGMENT};

/// Regeneration requests honoured per step; later ones fall back to automatic selection.
pub const MAX_REGENERATIONS: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HookPlan {
    pub pre: bool,
    pub post: bool,
}

impl HookPlan {
    pub const NONE: HookPlan = HookPlan { pre: false, post: false };
    pub const BOTH: HookPlan = HookPlan { pre: true, post: true };
}

pub struct StepRequest<'a> {
    pub session_id: &'a str,
    pub agent: &'a AgentSpec,
    pub prompt: PromptBundle,
    pub iteration: u64,
    pub hooks: HookPlan,
    pub deadline: DeadlinePolicy,
}

/// Progress notifications, delivered before the step blocks on a human.
pub enum HitlEvent<'a> {
    PromptRebuilt(&'a PromptBundle),
    Generated {
        step: u64,
        candidates: &'a [Candidate],
    },
    Requested(&'a GuidanceRequest),
    Resolved {
        decision: &'a GuidanceDecision,
        feedback: &'a [FeedbackItem],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub candidates: Vec<Candidate>,
    /// Candidate picked by a human, if any.
    pub chosen: Option<usize>,
    pub rejected: Vec<usize>,
    pub restart: bool,
    pub decisions: Vec<GuidanceDecision>,
    pub feedback: Vec<FeedbackItem>,
    pub human_seconds: f64,
    pub prompt: PromptBundle,
}

impl StepOutcome {
    /// Candidates still eligible for automatic selection, in order.
    pub fn eligible(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| !self.rejected.contains(&c.index))
    }
}

fn with_feedback_line(prompt: &PromptBundle, line: &str) -> PromptBundle {
    let mut feedbacks = if prompt.feedbacks.trim() == EMPTY_SEGMENT { String::new() } else { prompt.feedbacks.clone() };
    if !feedbacks.trim().is_empty() {
        feedbacks.push('\n');
    }
    feedbacks.push_str(line);
    PromptBundle::from_segments([
        prompt.role_goal_constraints.clone(),
        prompt.state_observation.clone(),
        prompt.task.clone(),
        prompt.examples.clone(),
        feedbacks,
    ])
}

pub struct HumanLlm<'a> {
    pub backends: &'a HashMap<String, Arc<dyn ChatBackend>>,
    pub channel: Option<&'a dyn HumanChannel>,
}

impl HumanLlm<'_> {
    fn backend(&self, id: &str) -> Result<&dyn ChatBackend, AgentError> {
        self.backends
            .get(id)
            .map(|b| b.as_ref())
            .ok_or_else(|| AgentError::BackendUnavailable(format!("no backend `{id}` configured")))
    }

    fn ask(
        &self,
        req: &StepRequest<'_>,
        step: u64,
        phase: Phase,
        payload: GuidancePayload,
        candidates: &[Candidate],
        out: &mut StepOutcome,
        observer: &mut dyn FnMut(HitlEvent<'_>),
    ) -> Result<GuidanceAction, HitlError> {
        let channel = self.channel.ok_or(HitlError::NoChannel(req.agent.kind))?;
        let request = GuidanceRequest {
            id: GuidanceRequest::make_id(req.session_id, req.agent.kind, step, phase),
            session_id: req.session_id.to_owned(),
            agent: req.agent.kind,
            step,
            phase,
            payload,
            deadline: req.deadline,
        };
        observer(HitlEvent::Requested(&request));
        let decision = channel.decide(&request)?;
        decision.action.validate_for(&request)?;
        let feedback = record_feedback(
            &decision,
            &FeedbackContext {
                agent: req.agent.kind,
                iteration: req.iteration,
                step,
                candidates,
            },
        );
        observer(HitlEvent::Resolved {
            decision: &decision,
            feedback: &feedback,
        });
        out.human_seconds += decision.human_seconds;
        out.feedback.extend(feedback);
        let action = decision.action.clone();
        out.decisions.push(decision);
        Ok(action)
    }

    /// Runs one agent step. With no hooks this is plain candidate generation.
    pub fn run_step(
        &self,
        req: StepRequest<'_>,
        next_step: &mut dyn FnMut() -> u64,
        annotate: &mut dyn FnMut(&[Candidate]) -> Vec<Value>,
        observer: &mut dyn FnMut(HitlEvent<'_>),
    ) -> Result<StepOutcome, HitlError> {
        let mut agent = req.agent.clone();
        let mut out = StepOutcome {
            candidates: Vec::new(),
            chosen: None,
            rejected: Vec::new(),
            restart: false,
            decisions: Vec::new(),
            feedback: Vec::new(),
            human_seconds: 0.0,
            prompt: req.prompt.clone(),
        };
        let mut step = next_step();

        if req.hooks.pre {
            let payload = GuidancePayload::PreInference { prompt: out.prompt.clone() };
            match self.ask(&req, step, Phase::PreInference, payload, &[], &mut out, observer)? {
                GuidanceAction::ModifyPrompt { rendered } => {
                    let segs = PromptBundle::split_rendered(&rendered).expect("validated");
                    let [a, b, c, d, e] = segs.map_segments();
                    out.prompt = PromptBundle::from_segments([a, b, c, d, e]);
                    observer(HitlEvent::PromptRebuilt(&out.prompt));
                }
                GuidanceAction::AddInstructions { text } => {
                    out.prompt = with_feedback_line(&out.prompt, &format!("- [human corrective neutral] {}", text.trim()));
                    observer(HitlEvent::PromptRebuilt(&out.prompt));
                }
                GuidanceAction::AnswerDirectly { text } => {
                    out.candidates = vec![Candidate {
                        index: 0,
                        text,
                        temperature: 0.0,
                        human: true,
                        latency_ms: 0,
                    }];
                    out.chosen = Some(0);
                    observer(HitlEvent::Generated {
                        step,
                        candidates: &out.candidates,
                    });
                    return Ok(out);
                }
                GuidanceAction::SetCandidateCount { n } => agent.candidates = n,
                GuidanceAction::SwitchBackend { backend } => {
                    self.backend(&backend)?;
                    agent.backend = backend;
                }
                _ => {}
            }
        }

        out.candidates = generate_candidates(&agent, &out.prompt, self.backend(&agent.backend)?, step)?;
        observer(HitlEvent::Generated {
            step,
            candidates: &out.candidates,
        });
        if !req.hooks.post {
            return Ok(out);
        }

        let mut regenerations = 0;
        loop {
            let reports = annotate(&out.candidates);
            let payload = GuidancePayload::PostInference {
                candidates: out.candidates.clone(),
                reports,
            };
            let candidates = out.candidates.clone();
            let action = self.ask(&req, step, Phase::PostInference, payload, &candidates, &mut out, observer)?;
            let instructions = match action {
                GuidanceAction::Select { index } => {
                    out.chosen = Some(index);
                    None
                }
                GuidanceAction::EditInline { index, text } => {
                    let c = &mut out.candidates[index];
                    c.text = text;
                    c.human = true;
                    out.chosen = Some(index);
                    None
                }
                GuidanceAction::Reject { indices } => {
                    out.rejected = indices;
                    let all = out.candidates.iter().all(|c| out.rejected.contains(&c.index));
                    all.then(|| "all previous candidates were rejected".to_owned())
                }
                GuidanceAction::Regenerate { instructions } => Some(instructions),
                GuidanceAction::Restart => {
                    out.restart = true;
                    None
                }
                _ => None,
            };
            let Some(instructions) = instructions else { break };
            if regenerations >= MAX_REGENERATIONS {
                break;
            }
            regenerations += 1;
            out.rejected.clear();
            out.prompt = with_feedback_line(&out.prompt, &format!("- [human corrective negative] regenerate: {}", instructions.trim()));
            observer(HitlEvent::PromptRebuilt(&out.prompt));
            step = next_step();
            out.candidates = generate_candidates(&agent, &out.prompt, self.backend(&agent.backend)?, step)?;
            observer(HitlEvent::Generated {
                step,
                candidates: &out.candidates,
            });
        }
        Ok(out)
    }
}

trait MapSegments {
    fn map_segments(self) -> [String; 5];
}

impl MapSegments for Vec<(crate::agents::SegmentKind, String)> {
    fn map_segments(self) -> [String; 5] {
        let mut it = self.into_iter().map(|(_, body)| if body == EMPTY_SEGMENT { String::new() } else { body });
        std::array::from_fn(|_| it.next().unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{build_rdp_prompt, AgentKind, ReplayScript, ScriptedBackend};
    use crate::hitl::{ScriptedDecision, ScriptedHuman, ScriptedHumanFile};

    fn setup(responses: &[(u64, &[&str])]) -> (HashMap<String, Arc<dyn ChatBackend>>, Arc<ScriptedBackend>) {
        let mut script = ReplayScript::default();
        for (step, r) in responses {
            script.push(AgentKind::Coder, *step, r.iter().map(|s| s.to_string()).collect());
        }
        let backend = Arc::new(ScriptedBackend::new("default", script));
        let mut map: HashMap<String, Arc<dyn ChatBackend>> = HashMap::new();
        map.insert("default".into(), backend.clone());
        (map, backend)
    }

    fn human(decisions: Vec<(u64, Phase, GuidanceAction)>) -> ScriptedHuman {
        ScriptedHuman::new(ScriptedHumanFile {
            decisions: decisions
                .into_iter()
                .map(|(step, phase, action)| ScriptedDecision {
                    agent: AgentKind::Coder,
                    step,
                    phase,
                    action,
                    human_seconds: 10.0,
                    operator: None,
                })
                .collect(),
            strict: true,
        })
    }

    fn run(llm: &HumanLlm<'_>, hooks: HookPlan) -> Result<(StepOutcome, usize), HitlError> {
        let agent = AgentSpec::default_for(AgentKind::Coder);
        let prompt = build_rdp_prompt(&agent, "obs", "task", &[], &[], None).unwrap();
        let mut counter = 0;
        let mut events = 0;
        let out = llm.run_step(
            StepRequest {
                session_id: "s",
                agent: &agent,
                prompt,
                iteration: 0,
                hooks,
                deadline: DeadlinePolicy::Block,
            },
            &mut || {
                counter += 1;
                counter - 1
            },
            &mut |c| vec![Value::Null; c.len()],
            &mut |_| events += 1,
        )?;
        Ok((out, events))
    }

    #[test]
    fn passthrough_matches_inner_backend() {
        let (map, backend) = setup(&[(0, &["a", "b", "c"])]);
        let llm = HumanLlm { backends: &map, channel: None };
        let (out, _) = run(&llm, HookPlan::NONE).unwrap();
        let agent = AgentSpec::default_for(AgentKind::Coder);
        let prompt = build_rdp_prompt(&agent, "obs", "task", &[], &[], None).unwrap();
        let direct = generate_candidates(&agent, &prompt, backend.as_ref(), 0).unwrap();
        assert_eq!(out.candidates, direct);
        assert!(out.decisions.is_empty() && out.chosen.is_none());
    }

    #[test]
    fn answer_directly_skips_inner() {
        let (map, backend) = setup(&[]);
        let h = human(vec![(0, Phase::PreInference, GuidanceAction::AnswerDirectly { text: "X".into() })]);
        let llm = HumanLlm { backends: &map, channel: Some(&h) };
        let (out, _) = run(&llm, HookPlan::BOTH).unwrap();
        assert_eq!(out.candidates[0].text, "X");
        assert_eq!(out.chosen, Some(0));
        assert!(backend.requests().is_empty());
    }

    #[test]
    fn edit_inline_replaces_text_and_records_correction() {
        let (map, _) = setup(&[(0, &["a", "b", "c"])]);
        let h = human(vec![
            (0, Phase::PreInference, GuidanceAction::Proceed),
            (0, Phase::PostInference, GuidanceAction::EditInline { index: 1, text: "b fixed".into() }),
        ]);
        let llm = HumanLlm { backends: &map, channel: Some(&h) };
        let (out, _) = run(&llm, HookPlan::BOTH).unwrap();
        assert_eq!(out.chosen, Some(1));
        assert_eq!(out.candidates[1].text, "b fixed");
        assert!(out.candidates[1].human);
        assert_eq!(out.feedback.len(), 1);
        assert_eq!(out.feedback[0].kind, crate::agents::FeedbackKind::Corrective);
        assert!(out.feedback[0].text.contains("+ b fixed"));
        assert_eq!(out.human_seconds, 20.0);
    }

    #[test]
    fn regenerate_is_capped() {
        let (map, backend) = setup(&[(0, &["a", "b", "c"]), (1, &["d", "e", "f"]), (2, &["g", "h", "i"]), (3, &["j", "k", "l"])]);
        let regen = || GuidanceAction::Regenerate { instructions: "more detail".into() };
        let h = human((0..5).map(|s| (s, Phase::PostInference, regen())).collect());
        let llm = HumanLlm { backends: &map, channel: Some(&h) };
        let (out, _) = run(&llm, HookPlan { pre: false, post: true }).unwrap();
        assert_eq!(out.candidates[0].text, "j");
        assert_eq!(out.decisions.len(), MAX_REGENERATIONS + 1);
        assert_eq!(backend.requests().len(), 3 * (MAX_REGENERATIONS + 1));
        assert!(backend.requests().last().unwrap().prompt.contains("regenerate: more detail"));
        assert_eq!(out.chosen, None);
    }

    #[test]
    fn missing_channel_is_an_error() {
        let (map, _) = setup(&[(0, &["a", "b", "c"])]);
        let llm = HumanLlm { backends: &map, channel: None };
        assert!(matches!(run(&llm, HookPlan::BOTH), Err(HitlError::NoChannel(_))));
    }
}
