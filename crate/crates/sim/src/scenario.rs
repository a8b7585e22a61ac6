//! Declarative scenarios: a system config, a cast of actors and a script
//! of signed gateway calls, followed by end-of-run assertions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use ownlink_core::protocol::{derive_keypair, FaultMode, FaultPlan, SystemConfig};
use ownlink_core::trace::{SagaKind, Trace, TraceEvent};
use ownlink_core::types::{Address, EntryId, Millis};
use ownlink_gateway::{Client, Gateway, Role, ROUTES};

use crate::audit::{audit_trace, AuditReport, CHECKS};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot start system: {0}")]
    Start(String),
}

pub const SIM_OPS: &[&str] = &["sim/converge", "sim/advance", "sim/fault"];
const SIM_ACTOR: &str = "sim";
const ADMIN: &str = "admin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorRole {
    DataOwner,
    ThirdParty,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actor {
    pub name: String,
    pub role: ActorRole,
    /// Consent policy installed in the actor's vault. May use variables.
    #[serde(default)]
    pub policy: Option<Value>,
    #[serde(default = "yes")]
    pub vault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    #[serde(default = "yes")]
    pub ok: bool,
    #[serde(default)]
    pub code: Option<String>,
    /// JSON pointer into the response body, expected value.
    #[serde(default)]
    pub body: BTreeMap<String, Value>,
    /// JSON pointer to an array, expected length.
    #[serde(default)]
    pub len: BTreeMap<String, usize>,
    /// JSON pointer to an array (or object values), pattern that some element matches.
    #[serde(default)]
    pub contains: BTreeMap<String, Value>,
    /// JSON pointer to an array (or object values), pattern that no element matches.
    #[serde(default)]
    pub excludes: BTreeMap<String, Value>,
}

impl Default for Expect {
    fn default() -> Self {
        Self {
            ok: true,
            code: None,
            body: BTreeMap::new(),
            len: BTreeMap::new(),
            contains: BTreeMap::new(),
            excludes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default)]
    pub time: Option<Millis>,
    pub actor: String,
    pub op: String,
    #[serde(default)]
    pub params: Value,
    /// Variable name, JSON pointer into the response body.
    #[serde(default)]
    pub bind: BTreeMap<String, String>,
    #[serde(default)]
    pub expect: Expect,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// Ownership state of a contract (`null` for unknown contracts).
    State { name: String, contract: String, equals: Value },
    /// Directory mapping of an entry id.
    Directory { name: String, entry_id: String, equals: Value },
    /// One named audit check passes.
    Audit { name: String, check: String },
}

impl Assertion {
    pub fn name(&self) -> &str {
        match self {
            Assertion::State { name, .. } | Assertion::Directory { name, .. } | Assertion::Audit { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    #[serde(default = "yes")]
    pub include_directory: bool,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self { include_directory: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    pub system: SystemConfig,
    #[serde(default)]
    pub actors: Vec<Actor>,
    #[serde(default)]
    pub steps: Vec<Step>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
    #[serde(default)]
    pub adversary: AdversaryConfig,
}

impl Scenario {
    /// Parses and validates. Syntax and shape errors carry a line number.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.system.custodians.is_empty() {
            return bad("system.custodians is empty".into());
        }
        let mut names: BTreeSet<&str> = [ADMIN, SIM_ACTOR].into_iter().collect();
        for n in self.system.custodians.iter().chain(self.actors.iter().map(|a| &a.name)) {
            if !names.insert(n) {
                return bad(format!("actor name {n} is used twice or reserved"));
            }
        }
        let mut last = 0;
        for (i, s) in self.steps.iter().enumerate() {
            if !names.contains(s.actor.as_str()) {
                return bad(format!("step {i}: unknown actor {}", s.actor));
            }
            let known = ROUTES.iter().any(|r| r.operation == s.op) || SIM_OPS.contains(&s.op.as_str());
            if !known {
                return bad(format!("step {i}: unknown operation {}", s.op));
            }
            if SIM_OPS.contains(&s.op.as_str()) != (s.actor == SIM_ACTOR) {
                return bad(format!("step {i}: sim/* operations belong to the sim actor and only to it"));
            }
            if let Some(t) = s.time {
                if t < last {
                    return bad(format!("step {i}: time {t} goes backwards from {last}"));
                }
                last = t;
            }
            if s.repeat == 0 {
                return bad(format!("step {i}: repeat must be at least 1"));
            }
        }
        for a in &self.assertions {
            if let Assertion::Audit { check, .. } = a {
                if check != "all" && !CHECKS.contains(&check.as_str()) {
                    return bad(format!("assertion {}: unknown audit check {check}", a.name()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub assertions: Vec<AssertionResult>,
    pub audit: AuditReport,
    pub trace: Trace,
    pub exports: Exports,
}

/// Final system state in its exportable forms.
#[derive(Debug, Clone, Default)]
pub struct Exports {
    pub custodians: Vec<Address>,
    pub ledger_ndjson: String,
    pub ledger_state: String,
    /// Endpoint URL to identity store snapshot.
    pub stores: BTreeMap<String, String>,
    /// One record snapshot per custodian node.
    pub records: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed) && self.audit.passed()
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> =
            self.assertions.iter().filter(|a| !a.passed).map(|a| format!("{}: {}", a.name, a.detail)).collect();
        for c in self.audit.checks.iter().filter(|c| !c.passed) {
            for x in &c.counterexamples {
                out.push(format!("audit {} at step {}: {}", c.name, x.step, x.detail));
            }
        }
        out
    }
}

/// Replaces `${var}` references. A string that is exactly one reference
/// takes the variable's JSON value; embedded references are stringified.
pub fn substitute(v: &Value, vars: &BTreeMap<String, Value>) -> Result<Value, String> {
    Ok(match v {
        Value::String(s) => {
            if let Some(name) = s.strip_prefix("${").and_then(|r| r.strip_suffix('}')).filter(|n| !n.contains("${")) {
                return vars.get(name).cloned().ok_or_else(|| format!("unbound variable {name}"));
            }
            let mut out = String::new();
            let mut rest = s.as_str();
            while let Some(start) = rest.find("${") {
                out.push_str(&rest[..start]);
                let end = rest[start..].find('}').ok_or_else(|| format!("unterminated reference in {s:?}"))? + start;
                let name = &rest[start + 2..end];
                match vars.get(name).ok_or_else(|| format!("unbound variable {name}"))? {
                    Value::String(x) => out.push_str(x),
                    other => out.push_str(&other.to_string()),
                }
                rest = &rest[end + 1..];
            }
            out.push_str(rest);
            Value::String(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(|x| substitute(x, vars)).collect::<Result<_, _>>()?),
        Value::Object(m) => {
            Value::Object(m.iter().map(|(k, x)| Ok((k.clone(), substitute(x, vars)?))).collect::<Result<_, String>>()?)
        }
        other => other.clone(),
    })
}

fn pointer<'a>(body: &'a Value, p: &str) -> Option<&'a Value> {
    if p.is_empty() {
        Some(body)
    } else {
        body.pointer(p)
    }
}

/// Objects match when every key in `pattern` matches, arrays when the
/// pattern matches a prefix; other values compare equal.
fn matches_pattern(v: &Value, pattern: &Value) -> bool {
    match (v, pattern) {
        (Value::Object(m), Value::Object(p)) => p.iter().all(|(k, pv)| m.get(k).is_some_and(|x| matches_pattern(x, pv))),
        (Value::Array(a), Value::Array(p)) => p.len() <= a.len() && a.iter().zip(p).all(|(x, pv)| matches_pattern(x, pv)),
        _ => v == pattern,
    }
}

struct Runner {
    gateway: Gateway,
    clients: BTreeMap<String, Client>,
    vars: BTreeMap<String, Value>,
    failures: Vec<AssertionResult>,
}

impl Runner {
    fn call(&mut self, actor: &str, op: &str, params: Value) -> ownlink_gateway::Response {
        let client = self.clients.get_mut(actor).expect("validated actor");
        let env = client.envelope(op, params);
        self.gateway.handle(&env)
    }

    fn fail(&mut self, name: String, detail: String) {
        self.gateway.record_event(TraceEvent::Assertion { name: name.clone(), passed: false, detail: detail.clone() });
        self.failures.push(AssertionResult { name, passed: false, detail });
    }

    fn sim_op(&mut self, op: &str, params: &Value) -> Result<Value, String> {
        match op {
            "sim/converge" => {
                self.gateway.converge();
                Ok(json!({}))
            }
            "sim/advance" => {
                let t = params["time"].as_u64().ok_or("sim/advance needs a numeric time")?;
                self.gateway.advance_time(t);
                Ok(json!({}))
            }
            "sim/fault" => {
                if params.is_null() || params.as_object().is_some_and(|m| m.is_empty()) {
                    self.gateway.set_fault(None);
                    return Ok(json!({}));
                }
                let saga: SagaKind = serde_json::from_value(params["saga"].clone()).map_err(|e| format!("saga: {e}"))?;
                let mode: FaultMode = serde_json::from_value(params.get("mode").cloned().unwrap_or(json!("recover")))
                    .map_err(|e| format!("mode: {e}"))?;
                let boundary = params["boundary"].as_u64().ok_or("sim/fault needs a boundary")? as usize;
                self.gateway.set_fault(Some(FaultPlan { saga, boundary, mode }));
                Ok(json!({}))
            }
            _ => Err(format!("no sim operation {op}")),
        }
    }

    fn step(&mut self, index: usize, step: &Step) {
        let label = match &step.label {
            Some(l) => format!("step {index} ({l})"),
            None => format!("step {index}"),
        };
        if let Some(t) = step.time {
            self.gateway.advance_time(t);
        }
        for _ in 0..step.repeat {
            let params = match substitute(&step.params, &self.vars) {
                Ok(p) => p,
                Err(e) => return self.fail(label, e),
            };
            let (ok, code, body) = if step.actor == SIM_ACTOR {
                match self.sim_op(&step.op, &params) {
                    Ok(b) => (true, None, b),
                    Err(e) => (false, Some("bad_request".to_string()), json!({ "message": e })),
                }
            } else {
                let r = self.call(&step.actor, &step.op, params);
                (r.ok, r.code.map(|c| c.as_str().to_string()), r.body)
            };
            if let Err(detail) = self.check(&step.expect, ok, code.as_deref(), &body) {
                return self.fail(label, detail);
            }
            for (var, p) in &step.bind {
                match pointer(&body, p) {
                    Some(v) => {
                        self.vars.insert(var.clone(), v.clone());
                    }
                    None => return self.fail(label, format!("cannot bind {var}: {p} missing from {body}")),
                }
            }
        }
    }

    fn check(&self, expect: &Expect, ok: bool, code: Option<&str>, body: &Value) -> Result<(), String> {
        if ok != expect.ok {
            return Err(format!("expected ok={} but got {} ({code:?}): {body}", expect.ok, ok));
        }
        if let Some(c) = &expect.code {
            if code != Some(c.as_str()) {
                return Err(format!("expected code {c}, got {code:?}"));
            }
        }
        for (p, want) in &expect.body {
            let want = substitute(want, &self.vars)?;
            let got = pointer(body, p);
            if got != Some(&want) {
                return Err(format!("{p}: expected {want}, got {}", got.map(Value::to_string).unwrap_or("nothing".into())));
            }
        }
        for (p, n) in &expect.len {
            let got = pointer(body, p).and_then(Value::as_array).map(Vec::len);
            if got != Some(*n) {
                return Err(format!("{p}: expected {n} items, got {got:?}"));
            }
        }
        for (p, pattern, want) in expect
            .contains
            .iter()
            .map(|(p, v)| (p, v, true))
            .chain(expect.excludes.iter().map(|(p, v)| (p, v, false)))
        {
            let pattern = substitute(pattern, &self.vars)?;
            let items: Vec<&Value> = match pointer(body, p) {
                Some(Value::Array(a)) => a.iter().collect(),
                Some(Value::Object(m)) => m.values().collect(),
                _ => return Err(format!("{p}: not an array or object")),
            };
            if items.into_iter().any(|x| matches_pattern(x, &pattern)) != want {
                let verb = if want { "no element matches" } else { "an element matches" };
                return Err(format!("{p}: {verb} {pattern}"));
            }
        }
        Ok(())
    }

    fn assertion(&self, a: &Assertion, audit: &AuditReport) -> AssertionResult {
        let sys = self.gateway.system();
        let (passed, detail) = match a {
            Assertion::State { contract, equals, .. } => match substitute(&json!(contract), &self.vars)
                .and_then(|c| serde_json::from_value(c).map_err(|e| e.to_string()))
            {
                Ok(c) => {
                    let got = serde_json::to_value(sys.state_of(&c)).expect("state serializes");
                    (got == *equals, format!("state is {got}"))
                }
                Err(e) => (false, e),
            },
            Assertion::Directory { entry_id, equals, .. } => {
                match substitute(&json!(entry_id), &self.vars)
                    .and_then(|e| serde_json::from_value::<EntryId>(e).map_err(|e| e.to_string()))
                {
                    Ok(id) => {
                        let got = serde_json::to_value(sys.ledger().directory_lookup(&id)).expect("address serializes");
                        match substitute(equals, &self.vars) {
                            Ok(want) => (got == want, format!("directory maps to {got}")),
                            Err(e) => (false, e),
                        }
                    }
                    Err(e) => (false, e),
                }
            }
            Assertion::Audit { check, .. } if check == "all" => {
                (audit.passed(), format!("{} checks failed", audit.checks.iter().filter(|c| !c.passed).count()))
            }
            Assertion::Audit { check, .. } => match audit.check(check) {
                Some(c) => (c.passed, format!("{} counterexamples", c.counterexamples.len())),
                None => (false, format!("no audit check {check}")),
            },
        };
        AssertionResult { name: a.name().to_string(), passed, detail }
    }
}

/// Runs a scenario to completion. The same scenario always yields the
/// same trace.
pub fn run(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    scenario.validate()?;
    let seed = scenario.seed;
    let mut config = scenario.system.clone();
    config.seed = seed;
    let admin = Client::new(derive_keypair(seed, ADMIN));
    let gateway = Gateway::new(config, admin.public_key()).map_err(|e| ScenarioError::Start(e.to_string()))?;

    let mut clients = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for (i, c) in gateway.system().custodians().iter().enumerate() {
        vars.insert(format!("{}.address", c.name), json!(c.address));
        vars.insert(format!("{}.endpoint", c.name), json!(c.endpoint_url));
        vars.insert(format!("{}.node", c.name), json!(i));
        clients.insert(c.name.clone(), Client::new(derive_keypair(seed, &c.name)));
    }
    for a in &scenario.actors {
        let client = Client::new(derive_keypair(seed, &a.name));
        vars.insert(format!("{}.address", a.name), json!(client.address()));
        clients.insert(a.name.clone(), client);
    }
    clients.insert(ADMIN.into(), admin);
    let mut r = Runner { gateway, clients, vars, failures: vec![] };

    for a in &scenario.actors {
        let role = match a.role {
            ActorRole::DataOwner => Role::DataOwner,
            ActorRole::ThirdParty => Role::ThirdParty,
        };
        let pk = r.clients[&a.name].public_key();
        let resp = r.call(ADMIN, "admin/register_principal", json!({"public_key": pk, "role": role, "name": a.name}));
        if !resp.ok {
            r.fail(format!("register {}", a.name), resp.body.to_string());
            continue;
        }
        if a.role == ActorRole::DataOwner && a.vault {
            let resp = r.call(&a.name, "vault/create_identity", json!({"seed": format!("{seed}:{}", a.name)}));
            if !resp.ok {
                r.fail(format!("vault for {}", a.name), resp.body.to_string());
                continue;
            }
            if let Some(policy) = &a.policy {
                match substitute(policy, &r.vars) {
                    Ok(policy) => {
                        let resp = r.call(&a.name, "vault/set_policy", json!({ "policy": policy }));
                        if !resp.ok {
                            r.fail(format!("policy for {}", a.name), resp.body.to_string());
                        }
                    }
                    Err(e) => r.fail(format!("policy for {}", a.name), e),
                }
            }
        }
    }

    for (i, step) in scenario.steps.iter().enumerate() {
        r.step(i, step);
    }
    r.gateway.finalize();
    let audit = audit_trace(r.gateway.trace());

    let mut assertions = std::mem::take(&mut r.failures);
    for a in &scenario.assertions {
        let res = r.assertion(a, &audit);
        r.gateway.record_event(TraceEvent::Assertion { name: res.name.clone(), passed: res.passed, detail: res.detail.clone() });
        assertions.push(res);
    }
    let sys = r.gateway.system();
    let exports = Exports {
        custodians: sys.custodians().iter().map(|c| c.address).collect(),
        ledger_ndjson: sys.ledger().export_ndjson(),
        ledger_state: sys.ledger().canonical_state(),
        stores: sys.stores().iter().map(|s| (s.endpoint_url().to_string(), s.export_snapshot())).collect(),
        records: sys.cluster().nodes().iter().map(|n| n.export_snapshot()).collect(),
    };
    Ok(RunReport { scenario: scenario.name.clone(), seed, assertions, audit, trace: r.gateway.into_trace(), exports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars() -> BTreeMap<String, Value> {
        [("a".to_string(), json!(3)), ("b".to_string(), json!("x"))].into_iter().collect()
    }

    #[test]
    fn whole_reference_keeps_type() {
        assert_eq!(substitute(&json!("${a}"), &vars()).unwrap(), json!(3));
        assert_eq!(substitute(&json!({"k": ["${b}"]}), &vars()).unwrap(), json!({"k": ["x"]}));
    }

    #[test]
    fn embedded_reference_is_stringified() {
        assert_eq!(substitute(&json!("n=${a}, s=${b}!"), &vars()).unwrap(), json!("n=3, s=x!"));
        assert!(substitute(&json!("${nope}"), &vars()).is_err());
        assert!(substitute(&json!("${a"), &vars()).is_err());
    }

    #[test]
    fn patterns_match_subsets() {
        let v = json!({"a": 1, "b": {"c": 2, "d": 3}});
        assert!(matches_pattern(&v, &json!({"b": {"c": 2}})));
        assert!(!matches_pattern(&v, &json!({"b": {"c": 3}})));
        assert!(!matches_pattern(&v, &json!({"z": 1})));
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = "{\n  \"name\": \"x\",\n  \"seed\": ,\n}";
        match Scenario::parse(text) {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn minimal() -> Value {
        json!({
            "name": "t",
            "seed": 1,
            "system": {"custodians": ["u"]},
            "actors": [{"name": "p", "role": "data_owner"}],
            "steps": [{"actor": "u", "op": "protocol/register_user", "params": {"payload": {"name": "P"}}}]
        })
    }

    #[test]
    fn validation_rejects_bad_scripts() {
        assert!(Scenario::parse(&minimal().to_string()).is_ok());
        let mut s = minimal();
        s["steps"][0]["actor"] = json!("ghost");
        assert!(matches!(Scenario::parse(&s.to_string()), Err(ScenarioError::Invalid(_))));
        let mut s = minimal();
        s["steps"][0]["op"] = json!("ledger/deploy");
        assert!(matches!(Scenario::parse(&s.to_string()), Err(ScenarioError::Invalid(_))));
        let mut s = minimal();
        s["actors"][0]["name"] = json!("u");
        assert!(matches!(Scenario::parse(&s.to_string()), Err(ScenarioError::Invalid(_))));
        let mut s = minimal();
        s["steps"] = json!([{"actor": "u", "op": "sim/converge"}]);
        assert!(matches!(Scenario::parse(&s.to_string()), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn failed_expectation_fails_the_run() {
        let mut s = minimal();
        s["steps"][0]["expect"] = json!({"ok": false});
        let report = run(&Scenario::parse(&s.to_string()).unwrap()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.assertions[0].name, "step 0");
    }

    #[test]
    fn bindings_flow_into_later_steps() {
        let mut s = minimal();
        s["steps"][0]["bind"] = json!({"c": "/contract_address"});
        s["steps"].as_array_mut().unwrap().push(json!({
            "actor": "u", "op": "ledger/read_contract", "params": {"contract": "${c}"},
            "expect": {"body": {"/endpoint_url": "${u.endpoint}"}}
        }));
        s["assertions"] = json!([
            {"kind": "state", "name": "held", "contract": "${c}", "equals": "custodian_held"},
            {"kind": "audit", "name": "clean", "check": "all"}
        ]);
        let report = run(&Scenario::parse(&s.to_string()).unwrap()).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }
}
