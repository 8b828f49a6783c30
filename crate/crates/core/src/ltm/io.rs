//! Model serialization: a single JSON document with the variables, the
//! undirected edges, the designated root, and one CPT per variable.
//! Probabilities round-trip exactly (shortest-representation doubles).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Cpt, LatentTreeModel, LtmError, ModelVariable, VarKind};

#[derive(Debug, Serialize, Deserialize)]
struct VarDoc {
    id: String,
    kind: String,
    level: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    item: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeDoc {
    a: String,
    b: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    variables: Vec<VarDoc>,
    edges: Vec<EdgeDoc>,
    root: String,
    cpts: BTreeMap<String, Vec<Vec<f64>>>,
}

impl LatentTreeModel {
    pub fn to_json(&self) -> String {
        let variables = self
            .vars()
            .iter()
            .map(|v| VarDoc {
                id: v.id.clone(),
                kind: if v.is_leaf() { "leaf" } else { "latent" }.to_string(),
                level: v.level,
                item: match &v.kind {
                    VarKind::Leaf { item } => Some(item.clone()),
                    VarKind::Latent => None,
                },
            })
            .collect();
        let edges = self
            .edges()
            .iter()
            .map(|&(a, b)| EdgeDoc {
                a: self.var(a).id.clone(),
                b: self.var(b).id.clone(),
            })
            .collect();
        let cpts = self
            .vars()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let rows = match self.cpt(i) {
                    Cpt::Root(row) => vec![row.to_vec()],
                    Cpt::Conditional(rows) => rows.iter().map(|r| r.to_vec()).collect(),
                };
                (v.id.clone(), rows)
            })
            .collect();
        let doc = ModelDoc {
            variables,
            edges,
            root: self.var(self.root()).id.clone(),
            cpts,
        };
        serde_json::to_string_pretty(&doc).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<LatentTreeModel, LtmError> {
        let doc: ModelDoc = serde_json::from_str(text)
            .map_err(|e| LtmError::BadConfig(format!("bad model document: {e}")))?;
        let mut vars = Vec::with_capacity(doc.variables.len());
        let mut index = std::collections::HashMap::new();
        for v in &doc.variables {
            let kind = match v.kind.as_str() {
                "leaf" => VarKind::Leaf {
                    item: v.item.clone().ok_or_else(|| LtmError::BadVariable {
                        var: v.id.clone(),
                        reason: "leaf without item".into(),
                    })?,
                },
                "latent" => VarKind::Latent,
                other => {
                    return Err(LtmError::BadVariable {
                        var: v.id.clone(),
                        reason: format!("unknown kind {other:?}"),
                    })
                }
            };
            index.insert(v.id.clone(), vars.len());
            vars.push(ModelVariable {
                id: v.id.clone(),
                kind,
                level: v.level,
            });
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| LtmError::UnknownVariable(id.to_string()))
        };
        let mut edges = Vec::with_capacity(doc.edges.len());
        for e in &doc.edges {
            edges.push((lookup(&e.a)?, lookup(&e.b)?));
        }
        let root = lookup(&doc.root)?;
        let mut cpts = vec![None; vars.len()];
        for (id, rows) in &doc.cpts {
            let i = lookup(id)?;
            let bad = |reason: &str| LtmError::BadCpt {
                var: id.clone(),
                reason: reason.to_string(),
            };
            let to_pair = |row: &Vec<f64>| -> Result<[f64; 2], LtmError> {
                if row.len() != 2 {
                    return Err(bad("rows must have two entries"));
                }
                Ok([row[0], row[1]])
            };
            cpts[i] = Some(match rows.len() {
                1 => Cpt::Root(to_pair(&rows[0])?),
                2 => Cpt::Conditional([to_pair(&rows[0])?, to_pair(&rows[1])?]),
                _ => return Err(bad("expected 1 row (root) or 2 rows (conditional)")),
            });
        }
        let cpts = cpts
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| LtmError::BadCpt {
                    var: vars[i].id.clone(),
                    reason: "missing CPT".into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        LatentTreeModel::new(vars, edges, root, cpts)
    }
}
