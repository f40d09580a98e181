use super::examples::{Candidate, Label, Task, TaskExample};
use super::vocab::{Vocab, ITEM_MARKER, ITEM_UNK, USER_MARKER, USER_UNK};
use crate::error::{CkfError, Result};

/// Fixed wording for one task: instruction, history slot, candidate slot,
/// question. The collaborative clause carries both placeholder markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task: Task,
    pub instruction: &'static str,
    pub history_label: &'static str,
    pub candidate_label: &'static str,
    pub question: &'static str,
}

const COLLAB_CLAUSE: &str = "collaborative signal : user <user_unk> item <item_unk> .";

impl PromptTemplate {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Rp => Self {
                task,
                instruction: "task : rating prediction .",
                history_label: "the user rated :",
                candidate_label: "candidate :",
                question: "what rating will the user give ? answer :",
            },
            Task::Ctr => Self {
                task,
                instruction: "task : click prediction .",
                history_label: "the user watched :",
                candidate_label: "candidate :",
                question: "will the user click ? answer :",
            },
            Task::TopK => Self {
                task,
                instruction: "task : top-k recommendation .",
                history_label: "the user watched :",
                candidate_label: "candidates :",
                question: "which candidate will the user pick ? answer :",
            },
            Task::Explain => Self {
                task,
                instruction: "task : explainable rating .",
                history_label: "the user wrote :",
                candidate_label: "candidate :",
                question: "what rating will the user give ? answer :",
            },
        }
    }
}

/// Every word the templates can emit, for vocabulary construction.
pub fn template_vocabulary() -> String {
    // separators used when joining history entries
    let mut s = format!("{COLLAB_CLAUSE} , ( )");
    for t in Task::ALL {
        let p = PromptTemplate::for_task(t);
        for part in [p.instruction, p.history_label, p.candidate_label, p.question] {
            s.push(' ');
            s.push_str(part);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Token ids, starting with BOS.
    pub ids: Vec<usize>,
    pub user_pos: Option<usize>,
    pub item_pos: Option<usize>,
}

fn title(titles: &[String], item: usize) -> Result<&str> {
    titles
        .get(item)
        .map(String::as_str)
        .ok_or_else(|| CkfError::contract(format!("item {item} has no title")))
}

pub fn render_text(ex: &TaskExample, titles: &[String], inject_collab: bool) -> Result<String> {
    let tpl = PromptTemplate::for_task(ex.task);
    let history = match (ex.task, &ex.history_comments) {
        (Task::Explain, Some(comments)) => comments.join(" . "),
        (Task::Rp, _) => ex
            .history
            .iter()
            .zip(&ex.history_ratings)
            .map(|(&v, r)| Ok(format!("{} ( {r} )", title(titles, v)?)))
            .collect::<Result<Vec<_>>>()?
            .join(" , "),
        _ => ex
            .history
            .iter()
            .map(|&v| title(titles, v).map(str::to_string))
            .collect::<Result<Vec<_>>>()?
            .join(" , "),
    };
    let candidate = match &ex.candidate {
        Candidate::Item(v) => title(titles, *v)?.to_string(),
        Candidate::Set(set) => set
            .iter()
            .map(|&v| title(titles, v).map(str::to_string))
            .collect::<Result<Vec<_>>>()?
            .join(" , "),
    };
    let mut text = format!(
        "{} {} {} . {} {} .",
        tpl.instruction, tpl.history_label, history, tpl.candidate_label, candidate
    );
    if inject_collab {
        text.push(' ');
        text.push_str(COLLAB_CLAUSE);
    }
    text.push(' ');
    text.push_str(tpl.question);
    Ok(text)
}

/// Renders and tokenizes `ex`. With `inject_collab` the prompt carries one
/// user and one item placeholder whose token positions are returned;
/// without it the collaborative clause is left out.
pub fn render_prompt(
    ex: &TaskExample,
    titles: &[String],
    vocab: &Vocab,
    inject_collab: bool,
) -> Result<RenderedPrompt> {
    let text = render_text(ex, titles, inject_collab)?;
    let ids = vocab.encode(&text);
    let find = |id: usize| -> Result<Option<usize>> {
        let hits: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == id)
            .map(|(i, _)| i)
            .collect();
        match (inject_collab, hits.as_slice()) {
            (true, [p]) => Ok(Some(*p)),
            (false, []) => Ok(None),
            _ => Err(CkfError::contract(format!(
                "prompt has {} copies of placeholder {}",
                hits.len(),
                vocab.token(id)
            ))),
        }
    };
    let user_pos = find(USER_UNK)?;
    let item_pos = find(ITEM_UNK)?;
    debug_assert!(!inject_collab || text.contains(USER_MARKER) && text.contains(ITEM_MARKER));
    Ok(RenderedPrompt {
        text,
        ids,
        user_pos,
        item_pos,
    })
}

/// Token ids of the supervised answer span.
pub fn answer_ids(ex: &TaskExample, titles: &[String], vocab: &Vocab) -> Result<Vec<usize>> {
    Ok(match ex.label {
        Label::Rating(r) => vec![vocab.rating_ids()[r as usize - 1]],
        Label::Click(true) => vec![vocab.yes_id()],
        Label::Click(false) => vec![vocab.no_id()],
        Label::Item(v) => vocab.tokenize(title(titles, v)?),
    })
}
