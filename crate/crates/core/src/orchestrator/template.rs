use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("undefined variable `{0}`")]
    UndefinedVariable(String),
    #[error("unterminated `{{{{` at byte {0}")]
    Unterminated(usize),
    #[error("empty placeholder at byte {0}")]
    EmptyPlaceholder(usize),
}

/// Replace every `{{ name }}` with `vars[name]`.
///
/// Substituted text is never scanned again, so a value containing `{{ x }}`
/// comes out verbatim. Either every placeholder is replaced or an error is
/// returned.
pub fn render_template(
    template: &str,
    vars: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    let mut offset = 0;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or(TemplateError::Unterminated(offset + open))?;
        let name = after[..close].trim();
        if name.is_empty() {
            return Err(TemplateError::EmptyPlaceholder(offset + open));
        }
        let value = vars
            .get(name)
            .ok_or_else(|| TemplateError::UndefinedVariable(name.to_string()))?;
        out.push_str(value);
        let consumed = open + 2 + close + 2;
        rest = &rest[consumed..];
        offset += consumed;
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn substitutes_power() {
        assert_eq!(
            render_template("bash gpio.sh {{ power }}", &vars(&[("power", "on")])).unwrap(),
            "bash gpio.sh on"
        );
    }

    #[test]
    fn identity_without_placeholders() {
        assert_eq!(render_template("no vars here", &vars(&[])).unwrap(), "no vars here");
    }

    #[test]
    fn single_pass() {
        let v = vars(&[("a", "x"), ("b", "{{a}}")]);
        assert_eq!(render_template("{{a}}{{ a }}-{{b}}", &v).unwrap(), "xx-{{a}}");
    }

    #[test]
    fn errors() {
        assert_eq!(
            render_template("x {{ missing }} {{ a }}", &vars(&[("a", "1")])),
            Err(TemplateError::UndefinedVariable("missing".into()))
        );
        assert_eq!(
            render_template("ab {{ a", &vars(&[("a", "1")])),
            Err(TemplateError::Unterminated(3))
        );
        assert_eq!(
            render_template("{{  }}", &vars(&[])),
            Err(TemplateError::EmptyPlaceholder(0))
        );
    }

    #[test]
    fn whitespace_inside_braces_is_free() {
        let v = vars(&[("n", "7")]);
        assert_eq!(render_template("{{n}}{{   n\t}}", &v).unwrap(), "77");
    }
}
