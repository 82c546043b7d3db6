//! Prompt templates for the two generation agents.
//!
//! Templates are plain-text files with `{{name}}` placeholders. A template
//! directory may override any of `question_system.txt`, `question_user.txt`,
//! `answer_system.txt`, `answer_user.txt`; missing files fall back to the
//! bundled defaults. Lines starting with `# template:` are metadata and are
//! dropped when rendering.

use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub question_system: String,
    pub question_user: String,
    pub answer_system: String,
    pub answer_user: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            question_system: include_str!("../templates/question_system.txt").to_string(),
            question_user: include_str!("../templates/question_user.txt").to_string(),
            answer_system: include_str!("../templates/answer_system.txt").to_string(),
            answer_user: include_str!("../templates/answer_user.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        let mut t = PromptTemplates::default();
        for (name, slot) in [
            ("question_system.txt", &mut t.question_system),
            ("question_user.txt", &mut t.question_user),
            ("answer_system.txt", &mut t.answer_system),
            ("answer_user.txt", &mut t.answer_user),
        ] {
            match fs::read_to_string(dir.join(name)) {
                Ok(s) => *slot = s,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(t)
    }
}

/// Substitutes `{{key}}` placeholders. Unknown placeholders are left as is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let body: String = template.lines().filter(|l| !l.starts_with("# template:")).map(|l| format!("{l}\n")).collect();
    let mut out = body;
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out.trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_and_drops_metadata() {
        let t = "# template: x v1\nHello {{name}}, {{name}}! {{other}}";
        assert_eq!(render(t, &[("name", "Ada")]), "Hello Ada, Ada! {{other}}");
    }

    #[test]
    fn defaults_have_placeholders() {
        let t = PromptTemplates::default();
        assert!(t.question_user.contains("{{chunk}}") && t.question_user.contains("{{n}}"));
        assert!(t.answer_user.contains("{{context}}") && t.answer_user.contains("{{question}}"));
    }

    #[test]
    fn directory_overrides_single_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("answer_user.txt"), "Q={{question}}").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.answer_user, "Q={{question}}");
        assert_eq!(t.question_user, PromptTemplates::default().question_user);
    }
}
