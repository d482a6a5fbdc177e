//! Relay network descriptions and their reduction to an effective
//! point-to-point channel.
//!
//! A network is a DAG whose interior nodes are filter-and-forward relays:
//! node `v` transmits `v_out[k] = sum_l h_v[l] * in_v[k-l]` where `in_v` is
//! the sum of everything arriving on its incoming edges plus its own input
//! noise `w_v`. The source is the reserved endpoint `S`, the destination is
//! `D`, and the direct `S -> D` edge must be present (the destination hears
//! the source at unit gain). The destination additionally suffers noise `z`.
//!
//! Reduction produces the effective single-filter form used by the bound
//! and block machinery: effective taps `h_eff` (the total relay response
//! from `x` to `y`) plus the law of the total injected noise
//! `n_inj = sum_v R_v(D) w_v` as seen at the destination.

use crate::lti::{
    self, coeff_autocov, conv, spectral_factorize, ArmaProcess, LtiError,
};
use nalgebra::DMatrix;
use std::collections::HashSet;
use std::fmt;

/// Errors from network construction, parsing, and reduction.
#[derive(Debug, Clone, PartialEq)]
pub enum RelayError {
    /// A relay filter was empty or contained non-finite taps.
    InvalidFilter(String),
    /// The edge relation contains a directed cycle.
    CycleDetected,
    /// No directed path carries the source to the destination.
    DisconnectedSource,
    /// The direct `S -> D` edge is absent; the effective channel form
    /// requires the destination to hear the source at unit gain.
    MissingDirectLink,
    /// Two nodes share an id, or a node uses a reserved endpoint name.
    DuplicateNode(String),
    /// An edge references an id that is neither a node nor `S`/`D`.
    UnknownNode(String),
    /// A network description file failed to parse.
    Parse { line: usize, msg: String },
    /// Noise composition failed while reducing the network.
    Noise(LtiError),
}

impl fmt::Display for RelayError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelayError::InvalidFilter(msg) => write!(f, "invalid relay filter: {msg}"),
            RelayError::CycleDetected => write!(f, "network contains a directed cycle"),
            RelayError::DisconnectedSource => {
                write!(f, "no directed path connects the source to the destination")
            }
            RelayError::MissingDirectLink => {
                write!(f, "the direct S -> D edge is required but absent")
            }
            RelayError::DuplicateNode(id) => write!(f, "duplicate or reserved node id `{id}`"),
            RelayError::UnknownNode(id) => write!(f, "edge references unknown node `{id}`"),
            RelayError::Parse { line, msg } => write!(f, "parse error on line {line}: {msg}"),
            RelayError::Noise(e) => write!(f, "noise composition failed: {e}"),
        }
    }
}

impl std::error::Error for RelayError {}

impl From<LtiError> for RelayError {
    fn from(e: LtiError) -> Self {
        RelayError::Noise(e)
    }
}

// ---------------------------------------------------------------------------
// FirFilter
// ---------------------------------------------------------------------------

/// A strictly causal FIR relay filter with taps at lags `1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    taps: Vec<f64>,
}

impl FirFilter {
    /// Build a filter from taps `h[1..=L]`; `L >= 1` and all taps finite.
    /// An all-zero filter is legal (the relay stays silent).
    pub fn new(taps: Vec<f64>) -> Result<Self, RelayError> {
        if taps.is_empty() {
            return Err(RelayError::InvalidFilter("a filter needs at least one tap".into()));
        }
        if !taps.iter().all(|t| t.is_finite()) {
            return Err(RelayError::InvalidFilter("non-finite tap".into()));
        }
        Ok(FirFilter { taps })
    }

    /// Taps `h[1..=L]`.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Number of taps `L`.
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    /// True when every tap is zero.
    pub fn is_silent(&self) -> bool {
        self.taps.iter().all(|&t| t == 0.0)
    }

    /// The channel polynomial `H(D) = 1 + sum_l h_l D^l`.
    pub fn h_poly(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.taps.len() + 1);
        p.push(1.0);
        p.extend_from_slice(&self.taps);
        p
    }

    /// The strictly causal part `H(D) - 1 = sum_l h_l D^l`.
    pub fn h_tilde(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.taps.len() + 1);
        p.push(0.0);
        p.extend_from_slice(&self.taps);
        p
    }

    /// Tap energy `sum_l h_l^2`.
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }
}

// ---------------------------------------------------------------------------
// RelayNetwork
// ---------------------------------------------------------------------------

/// One relay: an id, its FIR filter, its input noise law, and its power
/// budget multiplier `gamma` (its long-run transmit power may not exceed
/// `gamma * rho`).
#[derive(Debug, Clone)]
pub struct RelayNode {
    pub id: String,
    pub filter: FirFilter,
    pub noise: ArmaProcess,
    pub gamma: f64,
}

/// A DAG of filter-and-forward relays between the reserved endpoints
/// `S` (source) and `D` (destination).
#[derive(Debug, Clone)]
pub struct RelayNetwork {
    nodes: Vec<RelayNode>,
    edges: Vec<(String, String)>,
    rho: f64,
    dest_noise: ArmaProcess,
}

const SOURCE: &str = "S";
const DEST: &str = "D";

impl RelayNetwork {
    /// Validate and build a network. `edges` entries name node ids or the
    /// endpoints `S`/`D`.
    pub fn new(
        nodes: Vec<RelayNode>,
        edges: Vec<(String, String)>,
        rho: f64,
        dest_noise: ArmaProcess,
    ) -> Result<Self, RelayError> {
        let net = RelayNetwork { nodes, edges, rho, dest_noise };
        net.validate()?;
        Ok(net)
    }

    pub fn nodes(&self) -> &[RelayNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dest_noise(&self) -> &ArmaProcess {
        &self.dest_noise
    }

    fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    fn validate(&self) -> Result<(), RelayError> {
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if n.id == SOURCE || n.id == DEST || !seen.insert(n.id.clone()) {
                return Err(RelayError::DuplicateNode(n.id.clone()));
            }
        }
        for (a, b) in &self.edges {
            for id in [a, b] {
                if id != SOURCE && id != DEST && self.node_index(id).is_none() {
                    return Err(RelayError::UnknownNode(id.clone()));
                }
            }
        }
        if !self.edges.iter().any(|(a, b)| a == SOURCE && b == DEST) {
            return Err(RelayError::MissingDirectLink);
        }
        self.topo_order()?; // cycle check
        // Reachability S -> D through the edge relation.
        let mut reach: HashSet<&str> = HashSet::new();
        reach.insert(SOURCE);
        let mut grew = true;
        while grew {
            grew = false;
            for (a, b) in &self.edges {
                if reach.contains(a.as_str()) && reach.insert(b.as_str()) {
                    grew = true;
                }
            }
        }
        if !reach.contains(DEST) {
            return Err(RelayError::DisconnectedSource);
        }
        Ok(())
    }

    /// Topological order over relay node indices (Kahn's algorithm on the
    /// node-to-node subgraph).
    fn topo_order(&self) -> Result<Vec<usize>, RelayError> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (a, b) in &self.edges {
            if let (Some(i), Some(j)) = (self.node_index(a), self.node_index(b)) {
                adj[i].push(j);
                indeg[j] += 1;
            }
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop() {
            order.push(i);
            for &j in &adj[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queue.push(j);
                }
            }
        }
        if order.len() != n {
            return Err(RelayError::CycleDetected);
        }
        Ok(order)
    }

    /// Response polynomial (in the delay variable) from each node's OUTPUT
    /// to the destination: `T_v = sum_{(v,u)} (u == D ? 1 : h~_u * T_u)`.
    fn output_to_dest_responses(&self) -> Result<Vec<Vec<f64>>, RelayError> {
        let order = self.topo_order()?;
        let mut t: Vec<Vec<f64>> = vec![vec![0.0]; self.nodes.len()];
        for &v in order.iter().rev() {
            let mut acc = vec![0.0];
            for (a, b) in &self.edges {
                if self.node_index(a) == Some(v) {
                    let term = if b == DEST {
                        vec![1.0]
                    } else if let Some(u) = self.node_index(b) {
                        conv(&self.nodes[u].filter.h_tilde(), &t[u])
                    } else {
                        continue;
                    };
                    acc = poly_add(&acc, &term);
                }
            }
            t[v] = acc;
        }
        Ok(t)
    }

    /// Response polynomial from the source signal to each node's INPUT:
    /// `U_v = sum_{(a,v)} (a == S ? 1 : h~_a * U_a)`.
    fn source_to_input_responses(&self) -> Result<Vec<Vec<f64>>, RelayError> {
        let order = self.topo_order()?;
        let mut u: Vec<Vec<f64>> = vec![vec![0.0]; self.nodes.len()];
        for &v in order.iter() {
            let mut acc = vec![0.0];
            for (a, b) in &self.edges {
                if self.node_index(b) == Some(v) {
                    let term = if a == SOURCE {
                        vec![1.0]
                    } else if let Some(w) = self.node_index(a) {
                        conv(&self.nodes[w].filter.h_tilde(), &u[w])
                    } else {
                        continue;
                    };
                    acc = poly_add(&acc, &term);
                }
            }
            u[v] = acc;
        }
        Ok(u)
    }

    /// Reduce the network to its effective single-filter form: the total
    /// relay tap response `h_eff` from source to destination and the ARMA
    /// law of the total injected relay noise at the destination.
    ///
    /// Each relay's noise enters at that relay's input, so its path to the
    /// destination is `R_v = h~_v * T_v`; the injected noise is the
    /// independent sum `sum_v R_v(D) w_v`, returned in canonical
    /// minimum-phase form (common AR/MA roots cancelled).
    pub fn reduce_to_effective_filter(&self) -> Result<(FirFilter, ArmaProcess), RelayError> {
        let t = self.output_to_dest_responses()?;

        // h_eff: source contributions through every relay it feeds.
        let mut h_total = vec![0.0];
        for (a, b) in &self.edges {
            if a == SOURCE {
                if let Some(v) = self.node_index(b) {
                    let r_v = conv(&self.nodes[v].filter.h_tilde(), &t[v]);
                    h_total = poly_add(&h_total, &r_v);
                }
            }
        }
        debug_assert!(h_total[0].abs() < 1e-14, "relay paths always carry at least one lag");
        let mut taps: Vec<f64> = if h_total.len() > 1 { h_total[1..].to_vec() } else { vec![0.0] };
        while taps.len() > 1 && taps.last() == Some(&0.0) {
            taps.pop();
        }
        let h_eff = FirFilter::new(taps)?;

        // Injected noise law: independent sum over relays of R_v(D) w_v.
        let mut contributing: Vec<(Vec<f64>, &ArmaProcess)> = Vec::new();
        for (v, node) in self.nodes.iter().enumerate() {
            let r_v = conv(&node.filter.h_tilde(), &t[v]);
            let active = r_v.iter().any(|c| c.abs() > 1e-300) && !node.noise.is_zero();
            if active {
                contributing.push((r_v, &node.noise));
            }
        }
        if contributing.is_empty() {
            return Ok((h_eff, ArmaProcess::white(0.0)));
        }
        // Common AR denominator: product of every contributor's AR part;
        // per-contributor numerator: R_v * F_v * prod_{u != v} G_u.
        let mut ar_all = vec![1.0];
        for (_, w) in &contributing {
            ar_all = conv(&ar_all, w.ar_coeffs());
        }
        let mut acf_sum: Vec<f64> = Vec::new();
        for (i, (r_v, w)) in contributing.iter().enumerate() {
            let mut num = conv(r_v, w.ma_coeffs());
            for (j, (_, other)) in contributing.iter().enumerate() {
                if i != j {
                    num = conv(&num, other.ar_coeffs());
                }
            }
            let acf = coeff_autocov(&num);
            if acf.len() > acf_sum.len() {
                acf_sum.resize(acf.len(), 0.0);
            }
            for (m, v) in acf.iter().enumerate() {
                acf_sum[m] += v;
            }
        }
        let ma_all = spectral_factorize(&acf_sum)?;
        let (ar_red, ma_red) = lti::cancel_common_roots(ar_all, ma_all, 1e-7);
        let n_inj = ArmaProcess::new(ar_red, ma_red)?;
        Ok((h_eff, n_inj))
    }

    /// Per-node transmit power under the open-loop relaxation (source
    /// white at `rho`, no feedback correlation), with each budget
    /// `gamma_v * rho`. Returns `(id, power, budget)` per node.
    ///
    /// The input of node `v` is the independent sum of the source through
    /// `U_v` and every upstream noise through its path response; the
    /// transmit power follows from the input autocovariance and the node's
    /// taps. On a single relay this reduces to `|h|^2 (rho + sigma_w^2)`,
    /// and on chains/stars to the cascaded box constraints used by the
    /// series/parallel bounds.
    pub fn per_node_open_loop_powers(&self) -> Result<Vec<(String, f64, f64)>, RelayError> {
        let u_resp = self.source_to_input_responses()?;
        let mut out = Vec::with_capacity(self.nodes.len());
        for (v, node) in self.nodes.iter().enumerate() {
            let lv = node.filter.len();
            // Input autocovariance at lags 0..lv-1.
            let mut r_in = vec![0.0; lv];
            for m in 0..lv {
                // Source term: rho * sum_j U[j] U[j+m].
                let uu = &u_resp[v];
                let mut s = 0.0;
                for j in 0..uu.len().saturating_sub(m) {
                    s += uu[j] * uu[j + m];
                }
                r_in[m] += self.rho * s;
            }
            // Upstream noise terms: w_u path = h~_u * (output of u -> input of v).
            for (uidx, unode) in self.nodes.iter().enumerate() {
                let resp = self.output_to_input_response(uidx, v)?;
                let path = conv(&unode.filter.h_tilde(), &resp);
                let own = if uidx == v { vec![1.0] } else { vec![0.0] };
                let path = poly_add(&path, &own); // node v hears its own w_v directly
                if path.iter().all(|c| c.abs() < 1e-300) || unode.noise.is_zero() {
                    continue;
                }
                let max_shift = path.len() - 1 + lv;
                let acf = unode.noise.autocovariance(max_shift);
                for m in 0..lv {
                    r_in[m] += filtered_autocov(&path, &acf, m);
                }
            }
            let mut power = 0.0;
            for l1 in 0..lv {
                for l2 in 0..lv {
                    let lag = l1.abs_diff(l2);
                    power += node.filter.taps()[l1] * node.filter.taps()[l2] * r_in[lag];
                }
            }
            out.push((node.id.clone(), power, node.gamma * self.rho));
        }
        Ok(out)
    }

    /// Response polynomial from node `from`'s OUTPUT to node `to`'s INPUT.
    fn output_to_input_response(&self, from: usize, to: usize) -> Result<Vec<f64>, RelayError> {
        let order = self.topo_order()?;
        // Backward pass targeting `to`: V_u = sum_{(u,a)} [a == to] + h~_a V_a.
        let mut v: Vec<Vec<f64>> = vec![vec![0.0]; self.nodes.len()];
        for &w in order.iter().rev() {
            let mut acc = vec![0.0];
            for (a, b) in &self.edges {
                if self.node_index(a) == Some(w) {
                    if self.node_index(b) == Some(to) {
                        acc = poly_add(&acc, &[1.0]);
                    } else if let Some(u) = self.node_index(b) {
                        let term = conv(&self.nodes[u].filter.h_tilde(), &v[u]);
                        acc = poly_add(&acc, &term);
                    }
                }
            }
            v[w] = acc;
        }
        Ok(v[from].clone())
    }

    /// Parse a network description.
    ///
    /// Line-oriented format, `#` starts a comment:
    ///
    /// ```text
    /// rho = 1.0
    /// dest: sigma2 = 1.0                  # or beta = [...], alpha = [...]
    /// node r1: taps = [0.7], sigma2 = 1.0, gamma = 1.0
    /// node r2: taps = [0.5, 0.1], beta = [1.0, -0.5], alpha = [0.8], gamma = 2.0
    /// edge S -> r1
    /// edge r1 -> D
    /// edge S -> D
    /// ```
    ///
    /// Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, RelayError> {
        let mut rho: Option<f64> = None;
        let mut dest: Option<ArmaProcess> = None;
        let mut nodes: Vec<RelayNode> = Vec::new();
        let mut edges: Vec<(String, String)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let err = |msg: String| RelayError::Parse { line: lineno, msg };

            if let Some(rest) = line.strip_prefix("edge ") {
                let parts: Vec<&str> = rest.split("->").map(str::trim).collect();
                if parts.len() != 2 || parts[0].is_empty() || parts[1].is_empty() {
                    return Err(err("expected `edge A -> B`".into()));
                }
                edges.push((parts[0].to_string(), parts[1].to_string()));
            } else if let Some(rest) = line.strip_prefix("node ") {
                let (id, kvs) = rest
                    .split_once(':')
                    .ok_or_else(|| err("expected `node <id>: key = value, ...`".into()))?;
                let id = id.trim().to_string();
                if id.is_empty() {
                    return Err(err("empty node id".into()));
                }
                let kv = parse_kv_list(kvs, lineno)?;
                let mut taps: Option<Vec<f64>> = None;
                let mut gamma: Option<f64> = None;
                let mut sigma2: Option<f64> = None;
                let mut beta: Option<Vec<f64>> = None;
                let mut alpha: Option<Vec<f64>> = None;
                for (k, v) in kv {
                    match k.as_str() {
                        "taps" => taps = Some(v.into_array(lineno)?),
                        "gamma" => gamma = Some(v.into_scalar(lineno)?),
                        "sigma2" => sigma2 = Some(v.into_scalar(lineno)?),
                        "beta" => beta = Some(v.into_array(lineno)?),
                        "alpha" => alpha = Some(v.into_array(lineno)?),
                        other => return Err(err(format!("unknown node key `{other}`"))),
                    }
                }
                let taps = taps.ok_or_else(|| err(format!("node `{id}` is missing `taps`")))?;
                let gamma = gamma.ok_or_else(|| err(format!("node `{id}` is missing `gamma`")))?;
                let noise = parse_noise(sigma2, beta, alpha, lineno)?;
                nodes.push(RelayNode { id, filter: FirFilter::new(taps)?, noise, gamma });
            } else if let Some(rest) = line.strip_prefix("dest:") {
                let kv = parse_kv_list(rest, lineno)?;
                let mut sigma2: Option<f64> = None;
                let mut beta: Option<Vec<f64>> = None;
                let mut alpha: Option<Vec<f64>> = None;
                for (k, v) in kv {
                    match k.as_str() {
                        "sigma2" => sigma2 = Some(v.into_scalar(lineno)?),
                        "beta" => beta = Some(v.into_array(lineno)?),
                        "alpha" => alpha = Some(v.into_array(lineno)?),
                        other => return Err(err(format!("unknown dest key `{other}`"))),
                    }
                }
                dest = Some(parse_noise(sigma2, beta, alpha, lineno)?);
            } else if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "rho" => {
                        rho = Some(v.trim().parse::<f64>().map_err(|e| err(format!("bad rho: {e}")))?)
                    }
                    other => return Err(err(format!("unknown key `{other}`"))),
                }
            } else {
                return Err(err(format!("unrecognized line `{line}`")));
            }
        }

        let rho = rho.ok_or(RelayError::Parse { line: 0, msg: "missing `rho`".into() })?;
        let dest = dest.ok_or(RelayError::Parse { line: 0, msg: "missing `dest:` noise".into() })?;
        RelayNetwork::new(nodes, edges, rho, dest)
    }
}

fn parse_noise(
    sigma2: Option<f64>,
    beta: Option<Vec<f64>>,
    alpha: Option<Vec<f64>>,
    line: usize,
) -> Result<ArmaProcess, RelayError> {
    match (sigma2, beta, alpha) {
        (Some(s2), None, None) => {
            if s2 < 0.0 {
                return Err(RelayError::Parse { line, msg: "sigma2 must be nonnegative".into() });
            }
            Ok(ArmaProcess::white(s2.sqrt()))
        }
        (None, beta, Some(alpha)) => {
            let ar = beta.unwrap_or_else(|| vec![1.0]);
            ArmaProcess::new(ar, alpha).map_err(RelayError::Noise)
        }
        (None, Some(_), None) => Err(RelayError::Parse {
            line,
            msg: "`beta` requires a matching `alpha`".into(),
        }),
        (None, None, None) => Err(RelayError::Parse {
            line,
            msg: "noise needs either `sigma2` or `alpha`[/`beta`]".into(),
        }),
        _ => Err(RelayError::Parse {
            line,
            msg: "give either `sigma2` or `beta`/`alpha`, not both".into(),
        }),
    }
}

enum KvValue {
    Scalar(f64),
    Array(Vec<f64>),
}

impl KvValue {
    fn into_scalar(self, line: usize) -> Result<f64, RelayError> {
        match self {
            KvValue::Scalar(x) => Ok(x),
            KvValue::Array(_) => {
                Err(RelayError::Parse { line, msg: "expected a scalar, found an array".into() })
            }
        }
    }
    fn into_array(self, line: usize) -> Result<Vec<f64>, RelayError> {
        match self {
            KvValue::Array(v) => Ok(v),
            KvValue::Scalar(_) => {
                Err(RelayError::Parse { line, msg: "expected an array, found a scalar".into() })
            }
        }
    }
}

/// Split `key = value, key = value` where values may be `[a, b, c]` arrays.
fn parse_kv_list(s: &str, line: usize) -> Result<Vec<(String, KvValue)>, RelayError> {
    let mut parts: Vec<String> = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '[' => {
                depth += 1;
                cur.push(ch);
            }
            ']' => {
                depth = depth.checked_sub(1).ok_or(RelayError::Parse {
                    line,
                    msg: "unbalanced `]`".into(),
                })?;
                cur.push(ch);
            }
            ',' if depth == 0 => {
                parts.push(std::mem::take(&mut cur));
            }
            _ => cur.push(ch),
        }
    }
    if depth != 0 {
        return Err(RelayError::Parse { line, msg: "unbalanced `[`".into() });
    }
    if !cur.trim().is_empty() {
        parts.push(cur);
    }
    let mut out = Vec::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or(RelayError::Parse { line, msg: format!("expected `key = value` in `{part}`") })?;
        let k = k.trim().to_string();
        let v = v.trim();
        let value = if let Some(inner) = v.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or(RelayError::Parse { line, msg: "array missing closing `]`".into() })?;
            let vals: Result<Vec<f64>, _> = inner
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(str::parse::<f64>)
                .collect();
            KvValue::Array(vals.map_err(|e| RelayError::Parse { line, msg: format!("bad array: {e}") })?)
        } else {
            KvValue::Scalar(
                v.parse::<f64>()
                    .map_err(|e| RelayError::Parse { line, msg: format!("bad number `{v}`: {e}") })?,
            )
        };
        out.push((k, value));
    }
    Ok(out)
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, &x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, &x) in b.iter().enumerate() {
        out[i] += x;
    }
    out
}

/// Autocovariance at lag `m` of `y = P(D) w` given the autocovariance of
/// `w`: `R_y(m) = sum_{j,k} P_j P_k R_w(|m + j - k|)`.
fn filtered_autocov(poly: &[f64], acf: &[f64], m: usize) -> f64 {
    let mut s = 0.0;
    for (j, &pj) in poly.iter().enumerate() {
        if pj == 0.0 {
            continue;
        }
        for (k, &pk) in poly.iter().enumerate() {
            if pk == 0.0 {
                continue;
            }
            let lag = (m as isize + j as isize - k as isize).unsigned_abs();
            if lag < acf.len() {
                s += pj * pk * acf[lag];
            }
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Block channel
// ---------------------------------------------------------------------------

/// Finite-horizon matrices of the effective channel over `n` uses:
/// `y = H x + (H - I) w + z` with `H` unit-diagonal lower-triangular
/// banded Toeplitz built from the relay taps, plus the noise covariances
/// and the effective-noise covariance
/// `Kz_eff = (I - H^{-1}) Kw (I - H^{-1})' + H^{-1} Kz H^{-T}`.
#[derive(Debug, Clone)]
pub struct BlockChannel {
    h: DMatrix<f64>,
    h_inv: DMatrix<f64>,
    kw: DMatrix<f64>,
    kz: DMatrix<f64>,
    kz_eff: DMatrix<f64>,
    taps: FirFilter,
}

impl BlockChannel {
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn h_inv(&self) -> &DMatrix<f64> {
        &self.h_inv
    }
    pub fn kw(&self) -> &DMatrix<f64> {
        &self.kw
    }
    pub fn kz(&self) -> &DMatrix<f64> {
        &self.kz
    }
    pub fn kz_eff(&self) -> &DMatrix<f64> {
        &self.kz_eff
    }
    pub fn taps(&self) -> &FirFilter {
        &self.taps
    }
    pub fn horizon(&self) -> usize {
        self.h.nrows()
    }
}

/// Build the block matrices over a horizon of `n` channel uses.
///
/// `H^{-1}` is computed by the banded recursion `a_0 = 1`,
/// `a_k = -sum_{j=1..min(k,L)} h_j a_{k-j}` (it is Toeplitz with first
/// column `a`), which keeps the inverse exact to roundoff; the effective
/// covariance is symmetrized after assembly.
pub fn build_block_channel(
    taps: &FirFilter,
    w: &ArmaProcess,
    z: &ArmaProcess,
    n: usize,
) -> BlockChannel {
    assert!(n > 0, "horizon must be positive");
    let l = taps.len();
    let h = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if i > j && i - j <= l {
            taps.taps()[i - j - 1]
        } else {
            0.0
        }
    });
    let mut a = vec![0.0f64; n];
    a[0] = 1.0;
    for k in 1..n {
        let mut s = 0.0;
        for j in 1..=l.min(k) {
            s -= taps.taps()[j - 1] * a[k - j];
        }
        a[k] = s;
    }
    let h_inv = DMatrix::from_fn(n, n, |i, j| if i >= j { a[i - j] } else { 0.0 });

    let toeplitz = |acf: &[f64]| {
        DMatrix::from_fn(n, n, |i, j| {
            let m = i.abs_diff(j);
            if m < acf.len() {
                acf[m]
            } else {
                0.0
            }
        })
    };
    let kw = toeplitz(&w.autocovariance(n.saturating_sub(1)));
    let kz = toeplitz(&z.autocovariance(n.saturating_sub(1)));

    let eye = DMatrix::identity(n, n);
    let i_minus_hinv = &eye - &h_inv;
    let kz_eff_raw = &i_minus_hinv * &kw * i_minus_hinv.transpose()
        + &h_inv * &kz * h_inv.transpose();
    let kz_eff = (&kz_eff_raw + kz_eff_raw.transpose()) * 0.5;

    BlockChannel { h, h_inv, kw, kz, kz_eff, taps: taps.clone() }
}

// ---------------------------------------------------------------------------
// Exact relay transmit power
// ---------------------------------------------------------------------------

/// How the relay input statistics are supplied to
/// [`relay_power_exact`].
pub enum RelaySchedule<'a> {
    /// Finite-horizon block scheme: the source sends `x = s + B z_eff`
    /// with `s ~ N(0, Ks)` independent of the noises.
    Block { ks: &'a DMatrix<f64>, b: &'a DMatrix<f64>, channel: &'a BlockChannel },
    /// Stationary scheme: autocovariance of the relay input
    /// `u[k] = x[k] + w[k]` at lags `0..L`.
    Stationary { u_autocov: &'a [f64] },
}

/// Average per-use transmit power of the relay, `E[v^2]` with
/// `v = (H - I) u`, under either schedule description.
pub fn relay_power_exact(taps: &FirFilter, schedule: RelaySchedule<'_>) -> f64 {
    match schedule {
        RelaySchedule::Block { ks, b, channel } => {
            let n = channel.horizon();
            let eye = DMatrix::identity(n, n);
            let i_minus_hinv = &eye - channel.h_inv();
            // E[u u'] with u = x + w, x = s + B z_eff, and
            // E[z_eff w'] = (I - H^{-1}) Kw.
            let cross = b * &i_minus_hinv * channel.kw();
            let euu = ks
                + b * channel.kz_eff() * b.transpose()
                + &cross
                + cross.transpose()
                + channel.kw();
            let hm1 = channel.h() - &eye;
            let v_cov = &hm1 * euu * hm1.transpose();
            v_cov.trace() / n as f64
        }
        RelaySchedule::Stationary { u_autocov } => {
            let l = taps.len();
            assert!(
                u_autocov.len() >= l,
                "need relay-input autocovariance out to lag L-1"
            );
            let mut p = 0.0;
            for l1 in 0..l {
                for l2 in 0..l {
                    p += taps.taps()[l1] * taps.taps()[l2] * u_autocov[l1.abs_diff(l2)];
                }
            }
            p
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white_node(id: &str, taps: Vec<f64>, sigma2: f64, gamma: f64) -> RelayNode {
        RelayNode {
            id: id.into(),
            filter: FirFilter::new(taps).unwrap(),
            noise: ArmaProcess::white(sigma2.sqrt()),
            gamma,
        }
    }

    fn edges(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    /// Deterministic impulse propagation through the DAG: inject a unit
    /// impulse at `at` ("x" for the source signal, otherwise a node id for
    /// that node's input noise) and return the destination sequence from
    /// relay paths only (direct source term excluded).
    fn impulse_response(net: &RelayNetwork, at: &str, len: usize) -> Vec<f64> {
        let n = net.nodes().len();
        let mut inputs = vec![vec![0.0; len]; n];
        let mut dest = vec![0.0; len];
        // Source sequence.
        let mut x = vec![0.0; len];
        if at == "x" {
            x[0] = 1.0;
        }
        for (i, node) in net.nodes().iter().enumerate() {
            if node.id == at {
                inputs[i][0] += 1.0;
            }
        }
        // Process nodes in topological order, accumulating into inputs.
        let order: Vec<usize> = {
            // reuse public behavior: recompute a topo order by repeated scans
            let mut remaining: Vec<usize> = (0..n).collect();
            let mut order = Vec::new();
            while !remaining.is_empty() {
                let before = remaining.len();
                remaining.retain(|&i| {
                    let ready = net.edges().iter().all(|(a, b)| {
                        net.nodes().iter().position(|nd| &nd.id == a).map_or(true, |ai| {
                            net.nodes().iter().position(|nd| &nd.id == b) != Some(i)
                                || order.contains(&ai)
                        })
                    });
                    if ready {
                        order.push(i);
                        false
                    } else {
                        true
                    }
                });
                assert!(remaining.len() < before, "cycle in test network");
            }
            order
        };
        // Feed source into directly connected nodes.
        for (a, b) in net.edges() {
            if a == "S" {
                if let Some(i) = net.nodes().iter().position(|nd| &nd.id == b) {
                    for k in 0..len {
                        inputs[i][k] += x[k];
                    }
                }
            }
        }
        for &i in &order {
            let node = &net.nodes()[i];
            // The tap at lag l+1 uses inputs[k - (l+1)].
            let mut out = vec![0.0; len];
            for k in 0..len {
                for (l, &t) in node.filter.taps().iter().enumerate() {
                    let lag = l + 1;
                    if k >= lag {
                        out[k] += t * inputs[i][k - lag];
                    }
                }
            }
            for (a, b) in net.edges() {
                if a == &node.id {
                    if b == "D" {
                        for k in 0..len {
                            dest[k] += out[k];
                        }
                    } else if let Some(j) = net.nodes().iter().position(|nd| &nd.id == b) {
                        for k in 0..len {
                            inputs[j][k] += out[k];
                        }
                    }
                }
            }
        }
        dest
    }

    #[test]
    fn fir_validation() {
        assert!(FirFilter::new(vec![]).is_err());
        assert!(FirFilter::new(vec![f64::INFINITY]).is_err());
        let f = FirFilter::new(vec![0.0, 0.0]).unwrap();
        assert!(f.is_silent());
        assert_eq!(FirFilter::new(vec![0.5, 0.3]).unwrap().h_poly(), vec![1.0, 0.5, 0.3]);
    }

    #[test]
    fn validation_catches_structural_errors() {
        let nodes = vec![white_node("r1", vec![0.5], 1.0, 1.0)];
        // Missing direct link.
        let e = RelayNetwork::new(
            nodes.clone(),
            edges(&[("S", "r1"), ("r1", "D")]),
            1.0,
            ArmaProcess::white(1.0),
        );
        assert_eq!(e.unwrap_err(), RelayError::MissingDirectLink);
        // Unknown node.
        let e = RelayNetwork::new(
            nodes.clone(),
            edges(&[("S", "r2"), ("r1", "D"), ("S", "D")]),
            1.0,
            ArmaProcess::white(1.0),
        );
        assert!(matches!(e.unwrap_err(), RelayError::UnknownNode(_)));
        // Cycle.
        let two = vec![
            white_node("a", vec![0.5], 1.0, 1.0),
            white_node("b", vec![0.5], 1.0, 1.0),
        ];
        let e = RelayNetwork::new(
            two,
            edges(&[("S", "a"), ("a", "b"), ("b", "a"), ("a", "D"), ("S", "D")]),
            1.0,
            ArmaProcess::white(1.0),
        );
        assert_eq!(e.unwrap_err(), RelayError::CycleDetected);
        // Duplicate id.
        let dup = vec![
            white_node("a", vec![0.5], 1.0, 1.0),
            white_node("a", vec![0.3], 1.0, 1.0),
        ];
        let e = RelayNetwork::new(
            dup,
            edges(&[("S", "a"), ("a", "D"), ("S", "D")]),
            1.0,
            ArmaProcess::white(1.0),
        );
        assert!(matches!(e.unwrap_err(), RelayError::DuplicateNode(_)));
    }

    #[test]
    fn single_relay_reduction() {
        let net = RelayNetwork::new(
            vec![white_node("r1", vec![0.7], 2.0, 1.0)],
            edges(&[("S", "r1"), ("r1", "D"), ("S", "D")]),
            1.0,
            ArmaProcess::white(1.0),
        )
        .unwrap();
        let (h_eff, n_inj) = net.reduce_to_effective_filter().unwrap();
        assert_eq!(h_eff.taps(), &[0.7]);
        // Injected noise: 0.7 w[k-1], white with std 0.7*sqrt(2); the pure
        // delay is absorbed by canonicalization.
        assert!(n_inj.is_white());
        assert!((n_inj.variance() - 0.49 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_relays_add() {
        let net = RelayNetwork::new(
            vec![
                white_node("a", vec![0.4], 1.0, 1.0),
                white_node("b", vec![0.3], 0.5, 1.0),
            ],
            edges(&[("S", "a"), ("S", "b"), ("a", "D"), ("b", "D"), ("S", "D")]),
            1.0,
            ArmaProcess::white(1.0),
        )
        .unwrap();
        let (h_eff, n_inj) = net.reduce_to_effective_filter().unwrap();
        assert!((h_eff.taps()[0] - 0.7).abs() < 1e-14);
        assert_eq!(h_eff.len(), 1);
        let expect_var = 0.4f64.powi(2) * 1.0 + 0.3f64.powi(2) * 0.5;
        assert!((n_inj.variance() - expect_var).abs() < 1e-12);
    }

    #[test]
    fn series_chain_composes_delays() {
        let (a, b) = (0.5f64, 0.6f64);
        let (s1, s2) = (1.0f64, 0.5f64);
        let net = RelayNetwork::new(
            vec![
                white_node("r1", vec![a], s1, 1.0),
                white_node("r2", vec![b], s2, 1.0),
            ],
            edges(&[("S", "r1"), ("r1", "r2"), ("r2", "D"), ("S", "D")]),
            1.0,
            ArmaProcess::white(1.0),
        )
        .unwrap();
        let (h_eff, n_inj) = net.reduce_to_effective_filter().unwrap();
        assert_eq!(h_eff.taps().len(), 2);
        assert!((h_eff.taps()[0] - 0.0).abs() < 1e-14);
        assert!((h_eff.taps()[1] - a * b).abs() < 1e-14);
        // n_inj = a b w1[k-2] + b w2[k-1]: white with summed variance.
        let expect_var = a * a * b * b * s1 + b * b * s2;
        assert!(n_inj.is_white(), "delayed independent whites sum to white");
        assert!((n_inj.variance() - expect_var).abs() < 1e-12);
    }

    #[test]
    fn reduction_matches_impulse_propagation() {
        // A diamond with unequal branch lengths and a colored relay noise.
        let mut nodes = vec![
            white_node("a", vec![0.5, -0.2], 1.0, 1.0),
            white_node("b", vec![0.3], 0.5, 1.0),
            white_node("c", vec![0.4, 0.1], 0.25, 1.0),
        ];
        nodes[1].noise = ArmaProcess::new(vec![1.0, -0.5], vec![0.6]).unwrap();
        let net = RelayNetwork::new(
            nodes,
            edges(&[
                ("S", "a"),
                ("S", "b"),
                ("a", "c"),
                ("b", "c"),
                ("b", "D"),
                ("c", "D"),
                ("S", "D"),
            ]),
            1.0,
            ArmaProcess::white(1.0),
        )
        .unwrap();
        let (h_eff, _) = net.reduce_to_effective_filter().unwrap();
        let len = 12;
        let resp = impulse_response(&net, "x", len);
        let mut expect = vec![0.0; len];
        for (l, &t) in h_eff.taps().iter().enumerate() {
            expect[l + 1] = t;
        }
        for k in 0..len {
            assert!(
                (resp[k] - expect[k]).abs() < 1e-12,
                "source impulse mismatch at {k}: {resp:?} vs {expect:?}"
            );
        }
    }

    #[test]
    fn per_node_power_single_relay_matches_relaxation() {
        let net = RelayNetwork::new(
            vec![white_node("r1", vec![0.7], 2.0, 1.5)],
            edges(&[("S", "r1"), ("r1", "D"), ("S", "D")]),
            1.0,
            ArmaProcess::white(1.0),
        )
        .unwrap();
        let powers = net.per_node_open_loop_powers().unwrap();
        assert_eq!(powers.len(), 1);
        let (_, p, budget) = &powers[0];
        assert!((p - 0.49 * (1.0 + 2.0)).abs() < 1e-12);
        assert!((budget - 1.5).abs() < 1e-14);
    }

    #[test]
    fn block_channel_small_case() {
        let taps = FirFilter::new(vec![0.5]).unwrap();
        let ch = build_block_channel(&taps, &ArmaProcess::white(2.0_f64.sqrt()), &ArmaProcess::white(1.0), 2);
        let h = ch.h();
        assert_eq!((h[(0, 0)], h[(1, 0)], h[(1, 1)], h[(0, 1)]), (1.0, 0.5, 1.0, 0.0));
        let kz_eff = ch.kz_eff();
        // z_eff[0] = z[0]; z_eff[1] = 0.5 w[0] + z[1] - 0.5 z_eff[0].
        assert!((kz_eff[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((kz_eff[(0, 1)] + 0.5).abs() < 1e-12);
        assert!((kz_eff[(1, 1)] - (0.25 * 2.0 + 1.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn block_inverse_is_exact_at_large_horizon() {
        let taps = FirFilter::new(vec![0.5, -0.2, 0.1]).unwrap();
        let ch = build_block_channel(&taps, &ArmaProcess::white(1.0), &ArmaProcess::white(1.0), 512);
        let resid = (ch.h() * ch.h_inv() - DMatrix::<f64>::identity(512, 512)).abs().max();
        assert!(resid <= 1e-10, "H H^-1 deviates from I by {resid:.3e}");
    }

    #[test]
    fn relay_power_block_silent_source() {
        // x identically zero, white w: per-use power h^2 sigma_w^2 (n-1)/n.
        let n = 200;
        let taps = FirFilter::new(vec![0.7]).unwrap();
        let ch = build_block_channel(&taps, &ArmaProcess::white(1.0), &ArmaProcess::white(1.0), n);
        let zeros = DMatrix::zeros(n, n);
        let p = relay_power_exact(&taps, RelaySchedule::Block { ks: &zeros, b: &zeros, channel: &ch });
        let expect = 0.49 * (n as f64 - 1.0) / n as f64;
        assert!((p - expect).abs() < 1e-12);
        assert!((p - 0.49).abs() / 0.49 <= 0.005 + 1e-12, "within 0.5% of stationary at n=200");
    }

    #[test]
    fn relay_power_stationary_open_loop() {
        // Open-loop white x at rho: R_u(0) = rho + sigma_w^2.
        let taps = FirFilter::new(vec![0.7]).unwrap();
        let p = relay_power_exact(&taps, RelaySchedule::Stationary { u_autocov: &[1.0 + 0.5] });
        assert!((p - 0.49 * 1.5).abs() < 1e-14);
    }

    #[test]
    fn parser_round_trip() {
        let text = "\
# two-relay diamond
rho = 2.0
dest: sigma2 = 1.0
node r1: taps = [0.7], sigma2 = 1.0, gamma = 1.0
node r2: taps = [0.5, 0.1], beta = [1.0, -0.5], alpha = [0.8], gamma = 2.0
edge S -> r1
edge S -> r2
edge r1 -> D
edge r2 -> D
edge S -> D
";
        let net = RelayNetwork::parse(text).unwrap();
        assert_eq!(net.nodes().len(), 2);
        assert_eq!(net.rho(), 2.0);
        assert_eq!(net.nodes()[1].filter.taps(), &[0.5, 0.1]);
        assert_eq!(net.nodes()[1].noise.ar_coeffs(), &[1.0, -0.5]);
        assert!(net.reduce_to_effective_filter().is_ok());
    }

    #[test]
    fn parser_rejects_unknown_keys() {
        let text = "\
rho = 1.0
dest: sigma2 = 1.0
node r1: taps = [0.7], sigma2 = 1.0, gamma = 1.0, color = 3
edge S -> r1
edge r1 -> D
edge S -> D
";
        let e = RelayNetwork::parse(text).unwrap_err();
        assert!(matches!(e, RelayError::Parse { line: 3, .. }), "{e}");
    }
}
