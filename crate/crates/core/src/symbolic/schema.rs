use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::Deserialize;

use super::{ClusterProgram, Result, SymbolicError, Value, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Finite,
    Infinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarDecl {
    pub name: String,
    /// Sorted, deduplicated values. Empty for infinite variables.
    pub domain: Vec<Value>,
    pub kind: DomainKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDecl {
    pub name: String,
    pub vars: Vec<VarId>,
}

/// Variables, their partition into clusters, and exogenous inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    vars: Vec<VarDecl>,
    clusters: Vec<ClusterDecl>,
    exo: Vec<String>,
    by_name: HashMap<String, VarId>,
    cluster_of: Vec<usize>,
}

impl Schema {
    pub fn builder() -> SchemaBuilder {
        SchemaBuilder::default()
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn vars(&self) -> &[VarDecl] {
        &self.vars
    }

    pub fn var(&self, id: VarId) -> &VarDecl {
        &self.vars[id.0]
    }

    pub fn id(&self, name: &str) -> Option<VarId> {
        self.by_name.get(name).copied()
    }

    pub fn expect_id(&self, name: &str) -> Result<VarId> {
        self.id(name)
            .ok_or_else(|| SymbolicError::Schema(format!("undeclared variable {name}")))
    }

    pub fn clusters(&self) -> &[ClusterDecl] {
        &self.clusters
    }

    pub fn cluster_of(&self, v: VarId) -> usize {
        self.cluster_of[v.0]
    }

    pub fn exogenous(&self) -> &[String] {
        &self.exo
    }

    pub fn exo_index(&self, name: &str) -> Option<usize> {
        self.exo.iter().position(|e| e == name)
    }

    pub fn in_domain(&self, v: VarId, value: Value) -> bool {
        let d = &self.vars[v.0];
        d.kind == DomainKind::Infinite || d.domain.binary_search(&value).is_ok()
    }

    pub fn check_value(&self, v: VarId, value: Value) -> Result<()> {
        if self.in_domain(v, value) {
            Ok(())
        } else {
            Err(SymbolicError::OutOfDomain {
                var: self.vars[v.0].name.clone(),
                value,
            })
        }
    }

    /// Values of a state keyed by variable name.
    pub fn describe(&self, values: &[Value]) -> BTreeMap<String, Value> {
        self.vars
            .iter()
            .zip(values)
            .map(|(d, &v)| (d.name.clone(), v))
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct SchemaBuilder {
    vars: Vec<VarDecl>,
    clusters: Vec<(String, Vec<String>)>,
    exo: Vec<String>,
}

impl SchemaBuilder {
    pub fn var(&mut self, name: &str, domain: impl IntoIterator<Item = Value>) -> &mut Self {
        let mut domain: Vec<Value> = domain.into_iter().collect();
        domain.sort_unstable();
        domain.dedup();
        self.vars.push(VarDecl {
            name: name.to_string(),
            domain,
            kind: DomainKind::Finite,
        });
        self
    }

    pub fn infinite_var(&mut self, name: &str) -> &mut Self {
        self.vars.push(VarDecl {
            name: name.to_string(),
            domain: Vec::new(),
            kind: DomainKind::Infinite,
        });
        self
    }

    pub fn cluster(&mut self, name: &str, vars: &[&str]) -> &mut Self {
        self.clusters
            .push((name.to_string(), vars.iter().map(|s| s.to_string()).collect()));
        self
    }

    pub fn exogenous(&mut self, name: &str) -> &mut Self {
        self.exo.push(name.to_string());
        self
    }

    pub fn build(&self) -> Result<Schema> {
        let mut by_name = HashMap::new();
        for (i, v) in self.vars.iter().enumerate() {
            if by_name.insert(v.name.clone(), VarId(i)).is_some() {
                return Err(SymbolicError::Schema(format!("duplicate variable {}", v.name)));
            }
            if v.kind == DomainKind::Finite && v.domain.is_empty() {
                return Err(SymbolicError::Schema(format!("empty domain for {}", v.name)));
            }
        }
        let mut cluster_of = vec![usize::MAX; self.vars.len()];
        let mut clusters = Vec::new();
        for (ci, (name, vars)) in self.clusters.iter().enumerate() {
            let mut ids = Vec::new();
            for vn in vars {
                let id = *by_name.get(vn).ok_or_else(|| {
                    SymbolicError::Schema(format!("cluster {name} names undeclared {vn}"))
                })?;
                if cluster_of[id.0] != usize::MAX {
                    return Err(SymbolicError::Schema(format!(
                        "{vn} assigned to more than one cluster"
                    )));
                }
                cluster_of[id.0] = ci;
                ids.push(id);
            }
            clusters.push(ClusterDecl {
                name: name.clone(),
                vars: ids,
            });
        }
        if let Some(i) = cluster_of.iter().position(|&c| c == usize::MAX) {
            return Err(SymbolicError::Schema(format!(
                "{} belongs to no cluster",
                self.vars[i].name
            )));
        }
        let mut exo_seen = std::collections::HashSet::new();
        for e in &self.exo {
            if !exo_seen.insert(e) {
                return Err(SymbolicError::Schema(format!("duplicate exogenous {e}")));
            }
        }
        Ok(Schema {
            vars: self.vars.clone(),
            clusters,
            exo: self.exo.clone(),
            by_name,
            cluster_of,
        })
    }
}

/// Full assignment of the schema's variables at one time index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymbolicState {
    pub values: Vec<Value>,
    pub time: usize,
}

impl SymbolicState {
    pub fn new(values: Vec<Value>, time: usize) -> Self {
        Self { values, time }
    }

    pub fn get(&self, v: VarId) -> Value {
        self.values[v.0]
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.values.len() != schema.num_vars() {
            return Err(SymbolicError::Schema(format!(
                "state has {} values for {} variables",
                self.values.len(),
                schema.num_vars()
            )));
        }
        for (i, &v) in self.values.iter().enumerate() {
            schema.check_value(VarId(i), v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VarDoc {
    name: String,
    #[serde(default)]
    domain: Option<Vec<Value>>,
    /// Inclusive `[lo, hi]`.
    #[serde(default)]
    range: Option<[Value; 2]>,
    #[serde(default)]
    kind: Option<DomainKind>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterDoc {
    name: String,
    vars: Vec<String>,
    program: String,
    #[serde(default)]
    args: serde_json::Value,
}

/// JSON declaration of a schema whose cluster programs are looked up by name
/// in a [`RuleRegistry`].
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaDocument {
    variables: Vec<VarDoc>,
    clusters: Vec<ClusterDoc>,
    #[serde(default)]
    exogenous: Vec<String>,
}

type ProgramBuilder =
    dyn Fn(&Schema, &[VarId], &serde_json::Value) -> Result<ClusterProgram> + Send + Sync;

/// Named constructors for cluster programs.
#[derive(Default, Clone)]
pub struct RuleRegistry {
    builders: BTreeMap<String, Arc<ProgramBuilder>>,
}

impl RuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, f: F) -> &mut Self
    where
        F: Fn(&Schema, &[VarId], &serde_json::Value) -> Result<ClusterProgram>
            + Send
            + Sync
            + 'static,
    {
        self.builders.insert(name.to_string(), Arc::new(f));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.builders.keys()
    }
}

impl SchemaDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds the schema and one program per cluster, in declaration order.
    pub fn instantiate(&self, registry: &RuleRegistry) -> Result<(Schema, Vec<ClusterProgram>)> {
        let mut b = Schema::builder();
        for v in &self.variables {
            match (v.kind, &v.domain, &v.range) {
                (Some(DomainKind::Infinite), None, None) => {
                    b.infinite_var(&v.name);
                }
                (Some(DomainKind::Infinite), _, _) => {
                    return Err(SymbolicError::Schema(format!(
                        "infinite variable {} cannot list a domain",
                        v.name
                    )))
                }
                (_, Some(d), None) => {
                    b.var(&v.name, d.iter().copied());
                }
                (_, None, Some([lo, hi])) => {
                    b.var(&v.name, *lo..=*hi);
                }
                _ => {
                    return Err(SymbolicError::Schema(format!(
                        "variable {} needs exactly one of domain or range",
                        v.name
                    )))
                }
            }
        }
        for c in &self.clusters {
            let names: Vec<&str> = c.vars.iter().map(String::as_str).collect();
            b.cluster(&c.name, &names);
        }
        for e in &self.exogenous {
            b.exogenous(e);
        }
        let schema = b.build()?;
        let mut programs = Vec::new();
        for (ci, c) in self.clusters.iter().enumerate() {
            let f = registry.builders.get(&c.program).ok_or_else(|| {
                SymbolicError::Schema(format!("no registered program named {}", c.program))
            })?;
            programs.push(f(&schema, &schema.clusters()[ci].vars, &c.args)?);
        }
        Ok((schema, programs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_enforced() {
        let mut b = Schema::builder();
        b.var("a", [0, 1]).var("b", [0, 1]).cluster("c", &["a"]);
        assert!(matches!(b.build(), Err(SymbolicError::Schema(_))));
        b.cluster("d", &["b", "a"]);
        assert!(matches!(b.build(), Err(SymbolicError::Schema(_))));
        let mut ok = Schema::builder();
        ok.var("a", [0, 1]).var("b", [2, 1, 1]).cluster("c", &["a"]).cluster("d", &["b"]);
        let s = ok.build().unwrap();
        assert_eq!(s.var(VarId(1)).domain, vec![1, 2]);
        assert!(s.in_domain(VarId(1), 2));
        assert!(!s.in_domain(VarId(1), 0));
    }

    #[test]
    fn document_requires_registered_programs() {
        let doc = SchemaDocument::from_json(
            r#"{"variables":[{"name":"x","range":[0,3]}],
                "clusters":[{"name":"c","vars":["x"],"program":"missing"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            doc.instantiate(&RuleRegistry::new()),
            Err(SymbolicError::Schema(_))
        ));
        assert!(SchemaDocument::from_json(r#"{"variables":[],"clusters":[],"bogus":1}"#).is_err());
    }
}
