//! Dialogue prompt templates: system, initialization, interaction and the four
//! feedback messages, plus the format reminder issued when no decision tag parses.
//!
//! Slot syntax is `{name}`. Rendering substitutes slots literally; nothing else
//! in the template is touched.

pub const SYSTEM: &str = "You are a robot in given room. You need to complete the tasks according to human instructions. We provide an Available_Actions set and the corresponding explanations for each action. Each step, you should select one action from Available_Actions.";

/// `{image}` is where the first observation goes; `{taskname}` is the instruction.
pub const INITIALIZATION: &str = r#"{image}This is an image from your frontal perspective. Please select an action from the Available_Actions and fill in the arguments.
Task: {taskname}
Available_Actions: {
"navigate to <object>": Move to the object.
"pickup <object>": Pick up the object.
"put in <object>": Put the item in your hand into or on the object.
"toggle <object>": Switch the object on or off.
"open <object>": Open the object (container), and you will see inside the object.
"close <object>": Close the object.
"observe": You can obtain image of your directly rear, left, and right perspectives.
"move forward": Move forward to see more clearly.
"end": If you think you have completed the task, please output "end".}
Before making each decision, you can think, plan, and even reflect step by step, and then output your final action.
Your final action must strictly follow format: <DecisionMaking>Your Action</DecisionMaking>, for example, <DecisionMaking>observe</DecisionMaking>."#;

pub const INTERACTION: &str = "After executing your previous {action} , you get this new image above.
To complete your task, you can think step by step at first and then output your new action from the Available_Actions.
Your action must strictly follow format: <DecisionMaking>Your Action</DecisionMaking>, for example, <DecisionMaking>observe</DecisionMaking>.";

pub const FEEDBACK_NOT_NAVIGABLE: &str = r#"<|feedback|>Action: {action} is illegal, {object} is the most relevant item in this room and {action}. Object: {object} is not currently navigable, you can try "navigate to <object>" to reach nearby, larger objects for closer observation."#;

pub const FEEDBACK_UNAVAILABLE: &str = "<|feedback|>Action: {object} is illegal, Object: {object} is currently unavailable for interaction. Possible situations include: {object} does not exist in your current view; you are too far away from {object}; the {object} cannot perform operation {action}.\nYou can try \"move forward\" to approach the target object or \"navigate to <object>\" to reach nearby, larger objects for closer inspection.";

pub const FEEDBACK_NAVIGATION_MISMATCH: &str = "<|feedback|>Action: {action} is illegal, the name of the navigated object doesn't quite match the obejct in the image, please try navigating to another object first.";

pub const FEEDBACK_INTERACTION_MISMATCH: &str = "<|feedback|>Action: {action} is illegal, the name of the object doesn't quite match the obejct in the image, Please try interacting with another object or navigating to another object.";

/// Not part of the four illegal-action messages: sent when a reply carries no usable tag.
pub const FORMAT_REMINDER: &str = "<|feedback|>Your reply did not contain a valid action. Your action must strictly follow format: <DecisionMaking>Your Action</DecisionMaking>, for example, <DecisionMaking>observe</DecisionMaking>.";

/// Sent in place of a frame when the arm fails to carry out a manipulation.
pub const MANIPULATION_FAULT: &str = "<|feedback|>Action: {action} failed, the robot arm did not complete the operation on {object}.";

/// Which of the four illegal-action messages to send.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FeedbackTemplate {
    NotNavigable = 1,
    Unavailable = 2,
    NavigationMismatch = 3,
    InteractionMismatch = 4,
}

impl FeedbackTemplate {
    pub fn template(self) -> &'static str {
        match self {
            FeedbackTemplate::NotNavigable => FEEDBACK_NOT_NAVIGABLE,
            FeedbackTemplate::Unavailable => FEEDBACK_UNAVAILABLE,
            FeedbackTemplate::NavigationMismatch => FEEDBACK_NAVIGATION_MISMATCH,
            FeedbackTemplate::InteractionMismatch => FEEDBACK_INTERACTION_MISMATCH,
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

pub fn render_initialization(image: &str, task: &str) -> String {
    // `{image}` sits at the very start; the Available_Actions braces are literal
    let body = &INITIALIZATION["{image}".len()..];
    let body = body.replacen("{taskname}", task, 1);
    format!("{image}{body}")
}

pub fn render_interaction(action: &str) -> String {
    fill(INTERACTION, &[("action", action)])
}

pub fn render_feedback(which: FeedbackTemplate, action: &str, object: &str) -> String {
    fill(which.template(), &[("action", action), ("object", object)])
}

pub fn render_manipulation_fault(action: &str, object: &str) -> String {
    fill(MANIPULATION_FAULT, &[("action", action), ("object", object)])
}
