use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Color;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Lifting,
    Rotating,
    Pushing,
    OpeningClosing,
    Placing,
    Lighting,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Lifting,
        Category::Rotating,
        Category::Pushing,
        Category::OpeningClosing,
        Category::Placing,
        Category::Lighting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Lifting => "lifting",
            Category::Rotating => "rotating",
            Category::Pushing => "pushing",
            Category::OpeningClosing => "opening_closing",
            Category::Placing => "placing",
            Category::Lighting => "lighting",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Counter-clockwise for rotations, towards smaller x for pushes.
    Left,
    Right,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    /// Sign along the x axis.
    pub fn x_sign(self) -> f64 {
        match self {
            Direction::Left => -1.0,
            Direction::Right => 1.0,
        }
    }

    /// Sign of a rotation: left is counter-clockwise (positive degrees).
    pub fn rotation_sign(self) -> f64 {
        -self.x_sign()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskParams {
    Lift { color: Color },
    Rotate { color: Color, direction: Direction },
    Push { color: Color, direction: Direction },
    Place { color: Color },
    Slider { open: bool },
    Light { on: bool },
}

impl TaskParams {
    pub fn category(&self) -> Category {
        match self {
            TaskParams::Lift { .. } => Category::Lifting,
            TaskParams::Rotate { .. } => Category::Rotating,
            TaskParams::Push { .. } => Category::Pushing,
            TaskParams::Place { .. } => Category::Placing,
            TaskParams::Slider { .. } => Category::OpeningClosing,
            TaskParams::Light { .. } => Category::Lighting,
        }
    }

    pub fn target_color(&self) -> Option<Color> {
        match *self {
            TaskParams::Lift { color }
            | TaskParams::Rotate { color, .. }
            | TaskParams::Push { color, .. }
            | TaskParams::Place { color } => Some(color),
            TaskParams::Slider { .. } | TaskParams::Light { .. } => None,
        }
    }

    fn task_id(&self) -> String {
        match *self {
            TaskParams::Lift { color } => format!("lift_{}", color.name()),
            TaskParams::Rotate { color, direction } => {
                format!("rotate_{}_{}", color.name(), direction.name())
            }
            TaskParams::Push { color, direction } => {
                format!("push_{}_{}", color.name(), direction.name())
            }
            TaskParams::Place { color } => format!("place_{}", color.name()),
            TaskParams::Slider { open: true } => "open_slider".into(),
            TaskParams::Slider { open: false } => "close_slider".into(),
            TaskParams::Light { on: true } => "turn_on_light".into(),
            TaskParams::Light { on: false } => "turn_off_light".into(),
        }
    }

    fn templates(&self) -> &'static [&'static str] {
        match self {
            TaskParams::Lift { .. } => &[
                "lift the {color} cube",
                "pick up the {color} cube",
                "grasp the {color} cube and raise it",
                "raise the {color} block",
            ],
            TaskParams::Rotate { .. } => &[
                "rotate the {color} cube {dir}",
                "turn the {color} cube to the {dir}",
                "twist the {color} block {dir}",
                "spin the {color} cube {dir}",
            ],
            TaskParams::Push { .. } => &[
                "push the {color} cube {dir}",
                "slide the {color} cube to the {dir}",
                "nudge the {color} block {dir}",
                "move the {color} cube {dir} by pushing it",
            ],
            TaskParams::Place { .. } => &[
                "place the {color} cube in the green zone",
                "put the {color} cube on the green area",
                "move the {color} block into the green zone",
                "carry the {color} cube to the green area",
            ],
            TaskParams::Slider { open: true } => &[
                "open the slider",
                "slide the door open",
                "push the sliding door open",
                "move the slider to the open position",
            ],
            TaskParams::Slider { open: false } => &[
                "close the slider",
                "slide the door closed",
                "push the sliding door closed",
                "move the slider to the closed position",
            ],
            TaskParams::Light { on: true } => &[
                "turn on the light",
                "switch the light on",
                "press the button to turn the light on",
                "switch on the lamp",
            ],
            TaskParams::Light { on: false } => &[
                "turn off the light",
                "switch the light off",
                "press the button to turn the light off",
                "switch off the lamp",
            ],
        }
    }

    fn fill(&self, template: &str) -> String {
        let color = self.target_color().map(Color::name).unwrap_or("");
        let dir = match self {
            TaskParams::Rotate { direction, .. } | TaskParams::Push { direction, .. } => {
                direction.name()
            }
            _ => "",
        };
        template.replace("{color}", color).replace("{dir}", dir)
    }
}

/// Maximum number of paraphrase templates available per task.
pub const MAX_PARAPHRASES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub category: Category,
    pub params: TaskParams,
    /// Instruction templates with `{color}` / `{dir}` slots.
    pub templates: Vec<String>,
}

impl TaskSpec {
    pub fn new(params: TaskParams, paraphrases: usize) -> Result<Self> {
        if !(2..=MAX_PARAPHRASES).contains(&paraphrases) {
            return Err(Error::Config(format!(
                "paraphrase count must be in 2..={MAX_PARAPHRASES}, got {paraphrases}"
            )));
        }
        Ok(TaskSpec {
            task_id: params.task_id(),
            category: params.category(),
            params,
            templates: params.templates()[..paraphrases]
                .iter()
                .map(|t| t.to_string())
                .collect(),
        })
    }

    pub fn paraphrase_count(&self) -> usize {
        self.templates.len()
    }

    /// Slot-filled instruction text for one paraphrase.
    pub fn instruction_for(&self, paraphrase_index: usize) -> Result<String> {
        let template = self
            .templates
            .get(paraphrase_index)
            .ok_or(Error::OutOfRange {
                index: paraphrase_index,
                len: self.templates.len(),
            })?;
        Ok(self.params.fill(template))
    }

    pub fn instructions(&self) -> Vec<String> {
        self.templates.iter().map(|t| self.params.fill(t)).collect()
    }
}

/// Ordered set of tasks, indexed by task id.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    tasks: Vec<TaskSpec>,
}

impl Catalog {
    /// All tasks expressible in the world: 22 tasks over six categories.
    pub fn full(paraphrases: usize) -> Result<Self> {
        let mut params = Vec::new();
        for color in Color::ALL {
            params.push(TaskParams::Lift { color });
        }
        for color in Color::ALL {
            for direction in [Direction::Left, Direction::Right] {
                params.push(TaskParams::Rotate { color, direction });
            }
        }
        for color in Color::ALL {
            for direction in [Direction::Left, Direction::Right] {
                params.push(TaskParams::Push { color, direction });
            }
        }
        params.push(TaskParams::Slider { open: true });
        params.push(TaskParams::Slider { open: false });
        for color in Color::ALL {
            params.push(TaskParams::Place { color });
        }
        params.push(TaskParams::Light { on: true });
        params.push(TaskParams::Light { on: false });
        let tasks = params
            .into_iter()
            .map(|p| TaskSpec::new(p, paraphrases))
            .collect::<Result<Vec<_>>>()?;
        Ok(Catalog { tasks })
    }

    /// Restricts the full catalog to the listed task ids, in the given order.
    pub fn subset(paraphrases: usize, task_ids: &[impl AsRef<str>]) -> Result<Self> {
        let full = Catalog::full(paraphrases)?;
        let mut tasks = Vec::with_capacity(task_ids.len());
        for id in task_ids {
            let id = id.as_ref();
            let task = full
                .get(id)
                .ok_or_else(|| Error::Config(format!("unknown task id `{id}`")))?;
            if tasks.iter().any(|t: &TaskSpec| t.task_id == id) {
                return Err(Error::Config(format!("duplicate task id `{id}`")));
            }
            tasks.push(task.clone());
        }
        Ok(Catalog { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn by_category(&self) -> BTreeMap<Category, Vec<&TaskSpec>> {
        let mut map: BTreeMap<Category, Vec<&TaskSpec>> = BTreeMap::new();
        for t in &self.tasks {
            map.entry(t.category).or_default().push(t);
        }
        map
    }

    /// Every instruction string of every task.
    pub fn all_instructions(&self) -> Vec<String> {
        self.tasks.iter().flat_map(|t| t.instructions()).collect()
    }
}
