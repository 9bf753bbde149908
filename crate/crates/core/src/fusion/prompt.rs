use crate::types::DatasetTag;

use super::FusionRequest;

/// Version tag of the bundled template; recorded in run outputs.
pub const TEMPLATE_VERSION: &str = "fusion_v1";
const TEMPLATE: &str = include_str!("../../assets/prompts/fusion_v1.txt");

/// Appended on the single re-prompt after an unparseable response.
pub const STRICT_JSON_SUFFIX: &str =
    "\n\nReturn only the JSON object, for example {\"answer\": \"...\"}, with no other text.";

pub const STANDARD_INSTRUCTION: &str = "Standard JSON format with concise, direct answers";

/// Output-format instruction for each benchmark.
pub fn dataset_instruction(tag: DatasetTag) -> &'static str {
    match tag {
        DatasetTag::TabFact => r#"Generate JSON response with "answer" field containing ["True"] or ["False"]"#,
        DatasetTag::InfoTabs => {
            r#"Generate JSON response with "answer" field: ["Entail"], ["Contradict"], or ["Neutral"]"#
        }
        DatasetTag::TabMwp => "Output numeric answers without units when applicable",
        DatasetTag::FeTaQa => "Provide complete sentence responses, not keywords or phrases",
        DatasetTag::Wtq | DatasetTag::HiTab | DatasetTag::TatQa => STANDARD_INSTRUCTION,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionPrompt {
    pub text: String,
    /// Set when the dataset tag was not recognized and the standard
    /// instruction was used instead.
    pub warning: Option<String>,
}

/// Renders the fusion prompt. Substitution is single-pass, so braces inside
/// the question or table are never re-expanded.
pub fn build_fusion_prompt(req: &FusionRequest) -> FusionPrompt {
    let (instruction, warning) = match req.dataset_tag.parse::<DatasetTag>() {
        Ok(tag) => (dataset_instruction(tag), None),
        Err(_) => (
            STANDARD_INSTRUCTION,
            Some(format!(
                "unknown dataset tag {:?}; using the standard JSON instruction",
                req.dataset_tag
            )),
        ),
    };
    let lookup = |name: &str| -> Option<&str> {
        Some(match name {
            "question" => req.question.trim(),
            "table_markdown" => req.table_markdown.trim_end(),
            "text_answer" => req.text_output.answer.trim(),
            "text_explanation" => req.text_output.explanation.trim(),
            "vision_answer" => req.vision_output.answer.trim(),
            "vision_explanation" => req.vision_output.explanation.trim(),
            "dataset_instruction" => instruction,
            _ => return None,
        })
    };
    let mut out = String::with_capacity(TEMPLATE.len() + req.table_markdown.len() + 256);
    let mut rest = TEMPLATE.trim_end();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').and_then(|close| lookup(&after[..close]).map(|v| (close, v))) {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    FusionPrompt { text: out, warning }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ExpertOutput;

    fn req(tag: &str) -> FusionRequest {
        let out = |a: &str| ExpertOutput {
            answer: a.into(),
            explanation: format!("because {a}"),
            latency_seconds: 1.0,
            output_tokens: 3,
        };
        FusionRequest {
            example_id: "e".into(),
            question: "Is {table_markdown} a placeholder?".into(),
            table_markdown: "| a |\n| --- |\n| {x} |\n".into(),
            text_output: out("True"),
            vision_output: out("False"),
            dataset_tag: tag.into(),
        }
    }

    #[test]
    fn sections_appear_in_order() {
        let p = build_fusion_prompt(&req("wtq")).text;
        let pos = |needle: &str| p.find(needle).unwrap_or_else(|| panic!("missing {needle}"));
        assert!(pos("### Question") < pos("### Table\n"));
        assert!(pos("### Table\n") < pos("### Table-as-Text Model"));
        assert!(pos("### Table-as-Text Model") < pos("### Table-as-Image Model"));
        assert!(pos("### Table-as-Image Model") < pos("### Output Format"));
        assert!(p.ends_with(STANDARD_INSTRUCTION));
    }

    #[test]
    fn user_braces_are_not_expanded() {
        let p = build_fusion_prompt(&req("wtq")).text;
        assert!(p.contains("Is {table_markdown} a placeholder?"));
        assert!(p.contains("| {x} |"));
    }

    #[test]
    fn dataset_adaptations() {
        let tabfact = build_fusion_prompt(&req("tabfact")).text;
        assert!(tabfact.ends_with(r#"containing ["True"] or ["False"]"#));
        let fetaqa = build_fusion_prompt(&req("FeTaQA")).text;
        assert!(fetaqa.contains("complete sentence responses, not keywords"));
        let unknown = build_fusion_prompt(&req("squad"));
        assert!(unknown.text.ends_with(STANDARD_INSTRUCTION));
        assert!(unknown.warning.is_some());
    }

    #[test]
    fn prompts_are_deterministic() {
        assert_eq!(build_fusion_prompt(&req("infotabs")), build_fusion_prompt(&req("infotabs")));
    }
}
