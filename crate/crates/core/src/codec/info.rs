//! Exact discrete information measures over small joint tables.

use rand::Rng;

use crate::error::{invalid, Error, Result};

const MAX_SUPPORT: usize = 16;
/// Variable names [`verify_lemma1`] expects: target, task-irrelevant noise,
/// intermediate feature, latent, mask.
pub const LEMMA1_VARS: [&str; 5] = ["Y", "YN", "Z", "E", "M"];

/// `log2 C(H·W, k) + k·b` bits: the entropy ceiling of a b-bit mask with `k`
/// retained positions on an `H×W` grid.
pub fn entropy_bound(h: usize, w: usize, k: usize, bits: u8) -> Result<f64> {
    let n = h * w;
    if k == 0 || k > n {
        return invalid(format!("k = {k} outside 1..={n}"));
    }
    let ln_binom = libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0);
    Ok(ln_binom / std::f64::consts::LN_2 + (k * bits as usize) as f64)
}

/// Probability table over named finite variables, row-major with the last
/// variable varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    names: Vec<String>,
    sizes: Vec<usize>,
    pmf: Vec<f64>,
}

fn plogp_ratio(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p / q).log2()
    } else {
        0.0
    }
}

impl DiscreteJoint {
    pub fn new(vars: &[(&str, usize)], pmf: Vec<f64>) -> Result<Self> {
        let sizes: Vec<usize> = vars.iter().map(|v| v.1).collect();
        if let Some(s) = sizes.iter().find(|&&s| s == 0 || s > MAX_SUPPORT) {
            return invalid(format!("support size {s} outside 1..={MAX_SUPPORT}"));
        }
        let names: Vec<String> = vars.iter().map(|v| v.0.to_owned()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return invalid(format!("duplicate variable `{n}`"));
            }
        }
        let n: usize = sizes.iter().product();
        if pmf.len() != n {
            return invalid(format!("table needs {n} entries, got {}", pmf.len()));
        }
        if pmf.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return invalid("probabilities must be finite and nonnegative");
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("probabilities sum to {total}"));
        }
        Ok(Self { names, sizes, pmf })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no variable named `{name}`")))
    }

    fn indices(&self, vars: &[&str]) -> Result<Vec<usize>> {
        let idx = vars.iter().map(|v| self.index_of(v)).collect::<Result<Vec<_>>>()?;
        for (i, a) in idx.iter().enumerate() {
            if idx[..i].contains(a) {
                return invalid(format!("variable `{}` listed twice", self.names[*a]));
            }
        }
        Ok(idx)
    }

    /// Marginal table over `vars`, in the order given.
    pub fn marginal(&self, vars: &[&str]) -> Result<Vec<f64>> {
        let keep = self.indices(vars)?;
        let out_len: usize = keep.iter().map(|&i| self.sizes[i]).product();
        let mut out = vec![0.0; out_len];
        let mut digits = vec![0usize; self.sizes.len()];
        for &p in &self.pmf {
            let mut j = 0;
            for &i in &keep {
                j = j * self.sizes[i] + digits[i];
            }
            out[j] += p;
            for d in (0..digits.len()).rev() {
                digits[d] += 1;
                if digits[d] < self.sizes[d] {
                    break;
                }
                digits[d] = 0;
            }
        }
        Ok(out)
    }

    /// Shannon entropy in bits of the marginal over `vars`.
    pub fn entropy(&self, vars: &[&str]) -> Result<f64> {
        Ok(self
            .marginal(vars)?
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum())
    }

    /// `I(A;B) = Σ p(a,b) log2 [p(a,b) / (p(a) p(b))]` in bits.
    pub fn mutual_information(&self, a: &[&str], b: &[&str]) -> Result<f64> {
        let joint_vars: Vec<&str> = a.iter().chain(b).copied().collect();
        let pab = self.marginal(&joint_vars)?;
        let pa = self.marginal(a)?;
        let pb = self.marginal(b)?;
        let nb = pb.len();
        Ok(pab
            .iter()
            .enumerate()
            .map(|(j, &p)| plogp_ratio(p, pa[j / nb] * pb[j % nb]))
            .sum())
    }

    /// `I(A;B|C) = H(A,C) + H(B,C) − H(A,B,C) − H(C)`.
    pub fn conditional_mutual_information(&self, a: &[&str], b: &[&str], given: &[&str]) -> Result<f64> {
        let ac: Vec<&str> = a.iter().chain(given).copied().collect();
        let bc: Vec<&str> = b.iter().chain(given).copied().collect();
        let abc: Vec<&str> = a.iter().chain(b).chain(given).copied().collect();
        Ok(self.entropy(&ac)? + self.entropy(&bc)? - self.entropy(&abc)? - self.entropy(given)?)
    }
}

/// Both sides of the noise-suppression inequality plus the entropy decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1Report {
    /// `I(E,M; Y_N)`.
    pub lhs: f64,
    /// `I(E,M; Z) − I(E,M; Y)`.
    pub rhs: f64,
    pub holds: bool,
    pub i_em_z: f64,
    pub i_e_z: f64,
    pub h_m: f64,
}

const STRUCTURE_TOL: f64 = 1e-10;
const INEQUALITY_TOL: f64 = 1e-9;

/// Evaluates `I(E,M;Y_N) ≤ I(E,M;Z) − I(E,M;Y)` exactly. The joint must hold
/// variables named as in [`LEMMA1_VARS`], with `Y ⊥ Y_N` and
/// `(Y,Y_N) → Z → (E,M)` a Markov chain; otherwise a structural error.
pub fn verify_lemma1(j: &DiscreteJoint) -> Result<Lemma1Report> {
    let dep = j.mutual_information(&["Y"], &["YN"])?;
    if dep > STRUCTURE_TOL {
        return Err(Error::Structural(format!("Y and Y_N are dependent (I = {dep:.3e} bits)")));
    }
    let leak = j.conditional_mutual_information(&["E", "M"], &["Y", "YN"], &["Z"])?;
    if leak > STRUCTURE_TOL {
        return Err(Error::Structural(format!(
            "(E,M) depends on (Y,Y_N) beyond Z (I = {leak:.3e} bits)"
        )));
    }
    let em = ["E", "M"];
    let lhs = j.mutual_information(&em, &["YN"])?;
    let i_em_z = j.mutual_information(&em, &["Z"])?;
    let rhs = i_em_z - j.mutual_information(&em, &["Y"])?;
    Ok(Lemma1Report {
        lhs,
        rhs,
        holds: lhs <= rhs + INEQUALITY_TOL,
        i_em_z,
        i_e_z: j.mutual_information(&["E"], &["Z"])?,
        h_m: j.entropy(&["M"])?,
    })
}

fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // Cubing uniform draws skews toward peaked rows, which exercises
    // near-deterministic channels as well as diffuse ones.
    let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3) + 1e-300).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Samples a joint over [`LEMMA1_VARS`] factored as
/// `p(y) p(y_N) p(z | y, y_N) p(e, m | z)`; `sizes` follows the same order.
pub fn random_markov_joint(rng: &mut impl Rng, sizes: [usize; 5]) -> Result<DiscreteJoint> {
    let [ny, nn, nz, ne, nm] = sizes;
    let py = random_simplex(rng, ny);
    let pn = random_simplex(rng, nn);
    let pz: Vec<Vec<f64>> = (0..ny * nn).map(|_| random_simplex(rng, nz)).collect();
    let pem: Vec<Vec<f64>> = (0..nz).map(|_| random_simplex(rng, ne * nm)).collect();
    let mut pmf = Vec::with_capacity(ny * nn * nz * ne * nm);
    for y in 0..ny {
        for n in 0..nn {
            for z in 0..nz {
                let base = py[y] * pn[n] * pz[y * nn + n][z];
                pmf.extend(pem[z].iter().map(|q| base * q));
            }
        }
    }
    let total: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|p| *p /= total);
    let vars: Vec<(&str, usize)> = LEMMA1_VARS.iter().copied().zip(sizes).collect();
    DiscreteJoint::new(&vars, pmf)
}
