//! Finite discrete structural causal models with exact inference by
//! enumeration of the exogenous noise.

use std::collections::HashMap;
use std::fmt;

use super::CausalError;

type Mechanism = Box<dyn Fn(&[usize], usize) -> usize + Send + Sync>;

struct Variable {
    name: String,
    domain: Vec<String>,
    parents: Vec<usize>,
    noise: Vec<f64>,
    mechanism: Mechanism,
}

/// An acyclic SCM. Every variable `V` has its own exogenous noise `U_V`
/// with a finite distribution, and `V = f_V(parents(V), U_V)`.
pub struct DiscreteScm {
    vars: Vec<Variable>,
    order: Vec<usize>,
    index: HashMap<String, usize>,
}

impl fmt::Debug for DiscreteScm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("DiscreteScm");
        for v in &self.vars {
            let parents: Vec<&str> = v
                .parents
                .iter()
                .map(|&p| self.vars[p].name.as_str())
                .collect();
            d.field(&v.name, &parents);
        }
        d.finish()
    }
}

/// `do(variable = value)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Intervention {
    pub variable: String,
    pub value: String,
}

impl Intervention {
    pub fn new(variable: &str, value: &str) -> Self {
        Self {
            variable: variable.to_string(),
            value: value.to_string(),
        }
    }
}

struct PendingVariable {
    name: String,
    domain: Vec<String>,
    parents: Vec<String>,
    noise: Vec<f64>,
    mechanism: Mechanism,
}

#[derive(Default)]
pub struct ScmBuilder {
    pending: Vec<PendingVariable>,
}

impl ScmBuilder {
    /// A parentless variable drawn from `distribution` over `domain`.
    pub fn root(mut self, name: &str, domain: &[&str], distribution: &[f64]) -> Self {
        self.pending.push(PendingVariable {
            name: name.to_string(),
            domain: domain.iter().map(|s| s.to_string()).collect(),
            parents: Vec::new(),
            noise: distribution.to_vec(),
            mechanism: Box::new(|_, u| u),
        });
        self
    }

    /// A variable computed by `mechanism(parent values, noise value)`, with
    /// values given as domain indices.
    pub fn variable<F>(
        mut self,
        name: &str,
        domain: &[&str],
        parents: &[&str],
        noise: &[f64],
        mechanism: F,
    ) -> Self
    where
        F: Fn(&[usize], usize) -> usize + Send + Sync + 'static,
    {
        self.pending.push(PendingVariable {
            name: name.to_string(),
            domain: domain.iter().map(|s| s.to_string()).collect(),
            parents: parents.iter().map(|s| s.to_string()).collect(),
            noise: noise.to_vec(),
            mechanism: Box::new(mechanism),
        });
        self
    }

    pub fn build(self) -> Result<DiscreteScm, CausalError> {
        let mut index = HashMap::new();
        for (i, p) in self.pending.iter().enumerate() {
            if p.domain.is_empty() {
                return Err(CausalError::InvalidScm(format!(
                    "variable {} has an empty domain",
                    p.name
                )));
            }
            if index.insert(p.name.clone(), i).is_some() {
                return Err(CausalError::InvalidScm(format!(
                    "duplicate variable {}",
                    p.name
                )));
            }
            let total: f64 = p.noise.iter().sum();
            if p.noise.is_empty()
                || p.noise.iter().any(|&w| !(w >= 0.0))
                || (total - 1.0).abs() > 1e-9
            {
                return Err(CausalError::InvalidScm(format!(
                    "noise of {} is not a probability distribution",
                    p.name
                )));
            }
        }
        let mut vars = Vec::with_capacity(self.pending.len());
        for p in self.pending {
            let parents = p
                .parents
                .iter()
                .map(|q| {
                    index
                        .get(q)
                        .copied()
                        .ok_or_else(|| CausalError::UnknownVariable(q.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            vars.push(Variable {
                name: p.name,
                domain: p.domain,
                parents,
                noise: p.noise,
                mechanism: p.mechanism,
            });
        }
        let order = topological_order(&vars)?;
        let scm = DiscreteScm { vars, order, index };
        scm.check_totality()?;
        Ok(scm)
    }
}

fn topological_order(vars: &[Variable]) -> Result<Vec<usize>, CausalError> {
    let mut indegree: Vec<usize> = vars.iter().map(|v| v.parents.len()).collect();
    let mut ready: Vec<usize> = (0..vars.len())
        .filter(|&i| indegree[i] == 0)
        .rev()
        .collect();
    let mut order = Vec::with_capacity(vars.len());
    while let Some(i) = ready.pop() {
        order.push(i);
        for (j, v) in vars.iter().enumerate() {
            for _ in v.parents.iter().filter(|&&p| p == i) {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(j);
                }
            }
        }
    }
    if order.len() != vars.len() {
        let stuck: Vec<&str> = (0..vars.len())
            .filter(|i| !order.contains(i))
            .map(|i| vars[i].name.as_str())
            .collect();
        return Err(CausalError::Cyclic(stuck.join(", ")));
    }
    Ok(order)
}

impl DiscreteScm {
    pub fn builder() -> ScmBuilder {
        ScmBuilder::default()
    }

    pub fn variable_names(&self) -> Vec<&str> {
        self.vars.iter().map(|v| v.name.as_str()).collect()
    }

    fn var(&self, name: &str) -> Result<usize, CausalError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| CausalError::UnknownVariable(name.to_string()))
    }

    fn value(&self, var: usize, label: &str) -> Result<usize, CausalError> {
        self.vars[var]
            .domain
            .iter()
            .position(|d| d == label)
            .ok_or_else(|| CausalError::UnknownValue {
                variable: self.vars[var].name.clone(),
                value: label.to_string(),
            })
    }

    /// Every mechanism must map every parent assignment and noise value into
    /// its domain.
    fn check_totality(&self) -> Result<(), CausalError> {
        for v in &self.vars {
            let sizes: Vec<usize> = v
                .parents
                .iter()
                .map(|&p| self.vars[p].domain.len())
                .collect();
            let mut assignment = vec![0usize; sizes.len()];
            loop {
                for u in 0..v.noise.len() {
                    let out = (v.mechanism)(&assignment, u);
                    if out >= v.domain.len() {
                        return Err(CausalError::InvalidScm(format!(
                            "mechanism of {} leaves its domain",
                            v.name
                        )));
                    }
                }
                if !advance(&mut assignment, &sizes) {
                    break;
                }
            }
        }
        Ok(())
    }

    /// `E[outcome | conditions; do(interventions)]`, with the outcome read as
    /// the index of its value in the variable's domain.
    pub fn exact_expectation(
        &self,
        outcome: &str,
        conditions: &[(&str, &str)],
        interventions: &[Intervention],
    ) -> Result<f64, CausalError> {
        let y = self.var(outcome)?;
        self.expectation_of(|values| values[y] as f64, conditions, interventions)
    }

    /// `E[f(V) | conditions; do(interventions)]` by full enumeration of the
    /// exogenous noise. Intervened variables are replaced by constants.
    pub fn expectation_of<F: Fn(&[usize]) -> f64>(
        &self,
        f: F,
        conditions: &[(&str, &str)],
        interventions: &[Intervention],
    ) -> Result<f64, CausalError> {
        let mut forced: Vec<Option<usize>> = vec![None; self.vars.len()];
        for iv in interventions {
            let v = self.var(&iv.variable)?;
            forced[v] = Some(self.value(v, &iv.value)?);
        }
        let conds: Vec<(usize, usize)> = conditions
            .iter()
            .map(|(n, val)| {
                let v = self.var(n)?;
                Ok((v, self.value(v, val)?))
            })
            .collect::<Result<_, CausalError>>()?;

        let sizes: Vec<usize> = self
            .vars
            .iter()
            .zip(&forced)
            .map(|(v, f)| if f.is_some() { 1 } else { v.noise.len() })
            .collect();
        let mut noise = vec![0usize; self.vars.len()];
        let mut values = vec![0usize; self.vars.len()];
        let mut parent_buf = Vec::new();
        let (mut mass, mut weighted) = (0.0f64, 0.0f64);
        loop {
            let mut p = 1.0;
            for &i in &self.order {
                let v = &self.vars[i];
                values[i] = match forced[i] {
                    Some(val) => val,
                    None => {
                        p *= v.noise[noise[i]];
                        parent_buf.clear();
                        parent_buf.extend(v.parents.iter().map(|&q| values[q]));
                        (v.mechanism)(&parent_buf, noise[i])
                    }
                };
            }
            if p > 0.0 && conds.iter().all(|&(v, val)| values[v] == val) {
                mass += p;
                weighted += p * f(&values);
            }
            if !advance(&mut noise, &sizes) {
                break;
            }
        }
        if mass <= 0.0 {
            return Err(CausalError::ZeroProbabilityCondition);
        }
        Ok(weighted / mass)
    }

    /// Necessary indirect effect through the intervened mediator:
    /// `E[Y | c] − E[Y | c, do(mediator)]`.
    pub fn necessary_indirect_effect(
        &self,
        outcome: &str,
        conditions: &[(&str, &str)],
        mediator: &Intervention,
    ) -> Result<f64, CausalError> {
        let base = self.exact_expectation(outcome, conditions, &[])?;
        let cut = self.exact_expectation(outcome, conditions, std::slice::from_ref(mediator))?;
        Ok(base - cut)
    }
}

/// Odometer increment over mixed-radix digits; false once it wraps.
fn advance(digits: &mut [usize], sizes: &[usize]) -> bool {
    for (d, &s) in digits.iter_mut().zip(sizes) {
        *d += 1;
        if *d < s {
            return true;
        }
        *d = 0;
    }
    false
}

/// The weather/forecast/late-start/umbrella model: the weather is a fair
/// coin, the forecast matches the weather with probability 0.9, a late start
/// happens with probability 0.3, and the umbrella is brought iff rain is
/// forecast and the start is not late.
pub fn umbrella_scm() -> DiscreteScm {
    DiscreteScm::builder()
        .root("Weather", &["sun", "rain"], &[0.5, 0.5])
        .variable(
            "Forecast",
            &["sun", "rain"],
            &["Weather"],
            &[0.1, 0.9],
            |p, correct| if correct == 1 { p[0] } else { 1 - p[0] },
        )
        .root("LateStart", &["no", "yes"], &[0.7, 0.3])
        .variable(
            "Umbrella",
            &["no", "yes"],
            &["Forecast", "LateStart"],
            &[1.0],
            |p, _| (p[0] == 1 && p[1] == 0) as usize,
        )
        .build()
        .expect("the umbrella model is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn umbrella_values() {
        let scm = umbrella_scm();
        let e = scm
            .exact_expectation("Umbrella", &[("Weather", "rain")], &[])
            .unwrap();
        assert!((e - 0.63).abs() < 1e-12);
        let nie = scm
            .necessary_indirect_effect(
                "Umbrella",
                &[("Weather", "rain")],
                &Intervention::new("Forecast", "sun"),
            )
            .unwrap();
        assert!((nie - 0.63).abs() < 1e-12);
    }

    #[test]
    fn cycles_and_bad_tables_are_rejected() {
        let cyclic = DiscreteScm::builder()
            .variable("A", &["0", "1"], &["B"], &[1.0], |p, _| p[0])
            .variable("B", &["0", "1"], &["A"], &[1.0], |p, _| p[0])
            .build();
        assert!(matches!(cyclic, Err(CausalError::Cyclic(_))));
        let partial = DiscreteScm::builder()
            .root("A", &["0", "1"], &[0.5, 0.5])
            .variable("B", &["0"], &["A"], &[1.0], |p, _| p[0])
            .build();
        assert!(matches!(partial, Err(CausalError::InvalidScm(_))));
        let unknown = DiscreteScm::builder()
            .variable("B", &["0"], &["Z"], &[1.0], |_, _| 0)
            .build();
        assert!(matches!(unknown, Err(CausalError::UnknownVariable(_))));
    }

    #[test]
    fn impossible_condition() {
        let scm = umbrella_scm();
        let r = scm.exact_expectation(
            "Umbrella",
            &[("Forecast", "rain")],
            &[Intervention::new("Forecast", "sun")],
        );
        assert!(matches!(r, Err(CausalError::ZeroProbabilityCondition)));
    }
}
