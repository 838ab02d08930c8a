//! Language profiles: how a tool language is checked and executed.
//!
//! The engine never interprets tool code itself. A profile supplies the check
//! command, the run command and a harness that speaks the invocation protocol:
//! a JSON request on stdin, a tagged JSON response on stdout.

use serde::{Deserialize, Serialize};

/// Placeholder replaced by the tool source path in commands.
pub const FILE_PLACEHOLDER: &str = "{file}";
/// Placeholder replaced by the harness path in commands.
pub const HARNESS_PLACEHOLDER: &str = "{harness}";
/// Marker a harness prints on stderr when the tool attempts network access.
pub const NETWORK_BREACH_MARKER: &str = "TOOLFORGE_BREACH:network";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub id: String,
    pub extension: String,
    /// Parse-only check; exit 0 means the source parses. Diagnostics go to stderr
    /// as `line:column: message`.
    pub check_command: Vec<String>,
    pub run_command: Vec<String>,
    pub harness: String,
    /// Regex whose first capture group names a function definition.
    pub function_pattern: String,
    /// Regexes whose first capture group lists imported modules.
    pub import_patterns: Vec<String>,
    /// Standard-library modules usable without declaring them.
    pub builtin_modules: Vec<String>,
}

const PYTHON_CHECK: &str = r#"
import ast, sys
src = open(sys.argv[1], encoding="utf-8").read()
try:
    ast.parse(src)
except SyntaxError as e:
    sys.stderr.write("%s:%s: %s\n" % (e.lineno or 0, e.offset or 0, e.msg))
    sys.exit(1)
"#;

const PYTHON_HARNESS: &str = r#"
import sys, json, importlib.util, traceback, socket

def _deny(*a, **k):
    sys.stderr.write("TOOLFORGE_BREACH:network\n")
    sys.stderr.flush()
    raise PermissionError("network access denied by sandbox")

def _install_network_guard():
    socket.socket.connect = _deny
    socket.socket.connect_ex = _deny
    socket.socket.sendto = _deny
    socket.create_connection = _deny
    socket.getaddrinfo = _deny
    socket.gethostbyname = _deny

def _emit(obj, code):
    sys.stdout.write(json.dumps(obj))
    sys.stdout.flush()
    sys.exit(code)

def main():
    request = json.loads(sys.stdin.read())
    if request.get("no_network", True):
        _install_network_guard()
    try:
        spec = importlib.util.spec_from_file_location("tool", sys.argv[1])
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
        fn = getattr(module, request["entrypoint"])
        result = fn(request["state"], request.get("args") or {})
    except Exception as e:
        _emit({"ok": False, "error": {"type": type(e).__name__, "message": str(e),
               "traceback": traceback.format_exc(limit=4)}}, 1)
    out = {"ok": True, "state": result}
    predicate = request.get("predicate")
    if predicate:
        try:
            out["predicate"] = bool(eval(predicate, {"__builtins__": {"len": len, "any": any, "all": all,
                "sum": sum, "min": min, "max": max, "str": str, "isinstance": isinstance}},
                {"state": result, "args": request.get("args") or {}, "before": request["state"]}))
        except Exception as e:
            out["predicate"] = False
            out["predicate_error"] = str(e)
    _emit(out, 0)

main()
"#;

impl LanguageProfile {
    pub fn python3() -> Self {
        Self {
            id: "python3".into(),
            extension: "py".into(),
            check_command: vec!["python3".into(), "-I".into(), "-c".into(), PYTHON_CHECK.into(), FILE_PLACEHOLDER.into()],
            run_command: vec!["python3".into(), "-I".into(), HARNESS_PLACEHOLDER.into(), FILE_PLACEHOLDER.into()],
            harness: PYTHON_HARNESS.into(),
            function_pattern: r"(?m)^def\s+([A-Za-z_][A-Za-z0-9_]*)\s*\(".into(),
            import_patterns: vec![
                r"(?m)^\s*import\s+([A-Za-z_][\w.]*(?:\s*,\s*[A-Za-z_][\w.]*)*)".into(),
                r"(?m)^\s*from\s+([A-Za-z_][\w.]*)\s+import\b".into(),
            ],
            builtin_modules: [
                "json", "re", "math", "collections", "itertools", "functools", "string", "textwrap", "random",
                "statistics", "dataclasses", "typing", "copy", "heapq", "bisect", "difflib", "unicodedata",
                "datetime", "urllib",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }

    /// Function names defined at top level, in source order.
    pub fn functions(&self, source: &str) -> Vec<String> {
        let Ok(re) = regex::Regex::new(&self.function_pattern) else {
            return Vec::new();
        };
        re.captures_iter(source).map(|c| c[1].to_owned()).collect()
    }

    /// Top-level module names imported by the source.
    pub fn imports(&self, source: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for pattern in &self.import_patterns {
            let Ok(re) = regex::Regex::new(pattern) else { continue };
            for cap in re.captures_iter(source) {
                for item in cap[1].split(',') {
                    let top = item.trim().split('.').next().unwrap_or("").to_owned();
                    if !top.is_empty() && !out.contains(&top) {
                        out.push(top);
                    }
                }
            }
        }
        out
    }
}

/// Libraries tools may declare by default.
pub fn default_allowed_libraries() -> Vec<String> {
    ["langchain", "numpy", "pandas", "sklearn"].into_iter().map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_functions_and_imports() {
        let p = LanguageProfile::python3();
        let src = "import json, numpy.linalg\nfrom collections import Counter\n\ndef helper(x):\n    pass\n\ndef run(state, args):\n    return state\n";
        assert_eq!(p.functions(src), vec!["helper", "run"]);
        assert_eq!(p.imports(src), vec!["json", "numpy", "collections"]);
    }
}
