//! Classification and detection prompts.
//!
//! Description prompts come from a JSON file mapping class name to a list of
//! prompt strings. Category prompts are generated from a template in which
//! `{name}` is replaced by the class name.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backends::VisionBackend;
use crate::error::{Error, Result};
use crate::fusion::{Aggregation, PromptMode, TextClassBank};

pub type PromptFile = BTreeMap<String, Vec<String>>;

pub fn load_prompt_file(path: &Path) -> Result<PromptFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e))
}

pub fn category_prompts(classes: &[String], template: &str) -> Vec<Vec<String>> {
    classes
        .iter()
        .map(|c| vec![template.replace("{name}", c)])
        .collect()
}

pub fn description_prompts(classes: &[String], file: &PromptFile) -> Result<Vec<Vec<String>>> {
    classes
        .iter()
        .map(|c| match file.get(c) {
            Some(p) if !p.is_empty() => Ok(p.clone()),
            _ => Err(Error::InvalidInput(format!(
                "prompt file has no descriptions for class '{c}'"
            ))),
        })
        .collect()
}

/// Detection prompts are the bare class names.
pub fn detection_prompts(classes: &[String]) -> Vec<String> {
    classes.to_vec()
}

/// Encode every prompt and assemble the class bank.
pub fn build_bank<B: VisionBackend>(
    backend: &B,
    classes: &[String],
    prompts: &[Vec<String>],
    mode: PromptMode,
    aggregation: Aggregation,
) -> Result<TextClassBank> {
    let embeddings = prompts
        .iter()
        .map(|ps| {
            ps.iter()
                .map(|p| backend.encode_text(p))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    TextClassBank::new(classes.to_vec(), embeddings, mode, aggregation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_substitution() {
        let p = category_prompts(&["dog".into(), "cat".into()], "a photo of a {name}.");
        assert_eq!(
            p,
            vec![vec!["a photo of a dog."], vec!["a photo of a cat."]]
        );
    }

    #[test]
    fn descriptions_require_every_class() {
        let mut f = PromptFile::new();
        f.insert(
            "dog".into(),
            vec!["dog, which has fur".into(), "dog, which barks".into()],
        );
        let classes = vec!["dog".to_string()];
        assert_eq!(description_prompts(&classes, &f).unwrap()[0].len(), 2);
        assert!(description_prompts(&["cat".to_string()], &f).is_err());
    }
}
