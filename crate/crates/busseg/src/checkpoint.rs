//! Textual model checkpoints.
//!
//! ```text
//! busseg-checkpoint 1
//! step = 2000
//! mode = bus_full
//! num_known = 4
//! known_names = background,disc,square,cross
//! features = 8
//! outputs = 5
//! tau_inf = 0.5
//! params = 1029
//! [config]
//! <effective run configuration, one `key = value` per line>
//! [params]
//! <one parameter per line: the IEEE-754 bits as 16 lowercase hex digits>
//! ```
//!
//! Parameters are stored as raw bits, so a checkpoint reloads bit-exactly.

use busseg_core::model::SegNet;
use busseg_core::pseudolabel::ParamVector;
use busseg_core::trainer::{Mode, TrainedModel};
use busseg_core::ClassSpace;

pub const MAGIC: &str = "busseg-checkpoint 1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (expected `{MAGIC}` header)")]
    Magic,
    #[error("checkpoint line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("checkpoint: missing `{0}`")]
    Missing(&'static str),
    #[error("checkpoint: {0}")]
    Model(#[from] busseg_core::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub model: TrainedModel,
    pub known_names: Vec<String>,
    /// Echo of the configuration the model was trained with.
    pub config: String,
}

impl Checkpoint {
    pub fn encode(&self) -> String {
        let net = &self.model.net;
        let mut out = format!(
            "{MAGIC}\nstep = {}\nmode = {}\nnum_known = {}\nknown_names = {}\nfeatures = {}\noutputs = {}\ntau_inf = {}\nparams = {}\n[config]\n",
            self.step,
            self.model.mode.name(),
            self.model.class_space.num_known(),
            self.known_names.join(","),
            net.num_features(),
            net.num_outputs(),
            self.model.tau_inf,
            net.params().len(),
        );
        for line in self.config.lines() {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("[params]\n");
        for v in net.params().as_slice() {
            out.push_str(&format!("{:016x}\n", v.to_bits()));
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(MAGIC) {
            return Err(CheckpointError::Magic);
        }
        let syntax = |line: usize, reason: &str| CheckpointError::Syntax {
            line: line + 1,
            reason: reason.into(),
        };
        let mut header = std::collections::HashMap::new();
        for (i, line) in lines.by_ref() {
            if line == "[config]" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| syntax(i, "expected `key = value`"))?;
            header.insert(k.trim().to_string(), (i, v.trim().to_string()));
        }
        let field = |k: &'static str| header.get(k).ok_or(CheckpointError::Missing(k));
        fn num<T: std::str::FromStr>(
            (line, v): &(usize, String),
        ) -> Result<T, CheckpointError> {
            v.parse().map_err(|_| CheckpointError::Syntax {
                line: line + 1,
                reason: format!("bad number `{v}`"),
            })
        }
        let mut config = String::new();
        let mut in_params = false;
        let mut params = Vec::new();
        for (i, line) in lines {
            if !in_params {
                if line == "[params]" {
                    in_params = true;
                } else {
                    config.push_str(line);
                    config.push('\n');
                }
                continue;
            }
            let bits = u64::from_str_radix(line, 16)
                .ok()
                .filter(|_| line.len() == 16)
                .ok_or_else(|| syntax(i, "expected 16 hex digits"))?;
            params.push(f64::from_bits(bits));
        }
        if !in_params {
            return Err(CheckpointError::Missing("[params]"));
        }
        let (line, mode_name) = field("mode")?;
        let mode = Mode::from_name(mode_name).ok_or_else(|| syntax(*line, "unknown mode"))?;
        let count: usize = num(field("params")?)?;
        if count != params.len() {
            return Err(syntax(*line, "parameter count differs from `params`"));
        }
        let class_space = ClassSpace::new(num(field("num_known")?)?)?;
        let known_names: Vec<String> = field("known_names")?
            .1
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let net = SegNet::from_params(
            num(field("features")?)?,
            num(field("outputs")?)?,
            ParamVector(params),
        )?;
        if net.num_outputs() != mode.num_outputs(&class_space) {
            return Err(CheckpointError::Model(busseg_core::Error::InvalidParameter {
                name: "outputs",
                reason: "head count does not match mode and class space".into(),
            }));
        }
        Ok(Self {
            step: num(field("step")?)?,
            model: TrainedModel {
                mode,
                class_space,
                tau_inf: num(field("tau_inf")?)?,
                net,
            },
            known_names,
            config,
        })
    }
}
