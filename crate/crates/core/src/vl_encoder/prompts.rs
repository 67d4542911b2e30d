use std::sync::OnceLock;

const TABLE: &str = include_str!("../../assets/prompts.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptFormat {
    /// Describes blur; queried on the center view.
    BlurAware,
    /// Describes horizontal symmetry; queried on `[left | hflip(right)]`.
    DpAware,
    /// Describes left/right difference; queried on `[left | right]`.
    Difference,
}

pub struct PromptTable {
    pub version: u32,
    pub entries: Vec<(PromptFormat, String)>,
}

impl PromptTable {
    pub fn of(&self, format: PromptFormat) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(f, _)| *f == format)
            .map(|(_, p)| p.clone())
            .collect()
    }

    pub fn lookup(&self, prompt: &str) -> Option<PromptFormat> {
        let key = canonical_prompt(prompt);
        self.entries.iter().find(|(_, p)| *p == key).map(|(f, _)| *f)
    }
}

/// The versioned prompt table shipped with the crate.
pub fn prompt_table() -> &'static PromptTable {
    static TABLE_CELL: OnceLock<PromptTable> = OnceLock::new();
    TABLE_CELL.get_or_init(|| parse_table(TABLE))
}

fn parse_table(text: &str) -> PromptTable {
    let mut version = 0;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().rsplit("version ").next() {
                if let Ok(v) = v.trim().parse() {
                    version = v;
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (kind, prompt) = line.split_once('\t').expect("prompt table row needs a tab");
        let format = match kind {
            "blur_aware" => PromptFormat::BlurAware,
            "dp_aware" => PromptFormat::DpAware,
            "difference" => PromptFormat::Difference,
            other => panic!("unknown prompt format {other:?} in prompt table"),
        };
        entries.push((format, prompt.to_string()));
    }
    PromptTable { version, entries }
}

/// Strips surrounding whitespace and the optional `[...]` wrapper.
pub fn canonical_prompt(prompt: &str) -> String {
    let p = prompt.trim();
    let p = p
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(p);
    p.trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_the_eight_prompts() {
        let t = prompt_table();
        assert_eq!(t.version, 1);
        assert_eq!(
            t.of(PromptFormat::BlurAware),
            [
                "A blurry image.",
                "An obscured image.",
                "An out of focus image.",
                "An image lacking sharpness."
            ]
        );
        assert_eq!(
            t.of(PromptFormat::DpAware),
            [
                "A symmetrical image.",
                "A horizontally symmetrical image.",
                "A left-right symmetrical image.",
                "A symmetrical image at the pixel level."
            ]
        );
    }

    #[test]
    fn brackets_are_optional() {
        let t = prompt_table();
        assert_eq!(t.lookup("[A blurry image.]"), Some(PromptFormat::BlurAware));
        assert_eq!(t.lookup(" A symmetrical image. "), Some(PromptFormat::DpAware));
        assert_eq!(t.lookup("A cat."), None);
    }
}
