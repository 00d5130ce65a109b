//! Cross-silo federated orchestration: broadcast, capped-weight FedAvg,
//! local epochs, and per-round server evaluation.
//!
//! Every client trains every round. Client workers run on their own
//! threads with independent parameter copies and derived RNG streams;
//! results are joined and aggregated in client-index order so a whole run
//! is bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::datastore::ClientDataset;
use crate::episodes::{make_episode, AugmentRanges, SliceRef};
use crate::error::{Error, Result};
use crate::eval::{one_shot_validate, DiceReport};
use crate::losses::{total_loss, LossBreakdown};
use crate::protoseg::{harvest_grads, init_params, stage_params, EncoderConfig, ProtoConfig};
use crate::rng;
use crate::superpixel::SuperpixelConfig;
use crate::tensor::{ModelParams, Tape};

/// Federation schedule and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Per-epoch bound on local iterations; `None` removes the cap.
    pub iteration_cap: Option<usize>,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub global_seed: u64,
    pub baseline_mode: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 1,
            local_epochs: 1,
            iteration_cap: Some(1000),
            base_lr: 1e-3,
            lr_decay: 0.96,
            batch_size: 1,
            global_seed: 0,
            baseline_mode: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.local_epochs < 1 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.iteration_cap == Some(0) {
            return Err(Error::Config("iteration_cap must be >= 1 when present".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch_size {} unsupported; the episodic pipeline is batch-1",
                self.batch_size
            )));
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("base_lr and lr_decay must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form schedule `base_lr · decay^round`; no accumulation drift.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.base_lr * self.lr_decay.powi(round as i32)
    }
}

/// Segmentation pipeline settings shared by training and evaluation.
#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub enc: EncoderConfig,
    pub proto: ProtoConfig,
    pub superpixel: SuperpixelConfig,
    pub augment: AugmentRanges,
}

/// FedAvg weights λ ∝ min(count, cap), normalized.
pub fn aggregation_weights(slice_counts: &[usize], cap: Option<usize>) -> Result<Vec<f64>> {
    if slice_counts.is_empty() {
        return Err(Error::Config("aggregation over zero clients".into()));
    }
    if let Some(&bad) = slice_counts.iter().find(|&&c| c == 0) {
        let _ = bad;
        return Err(Error::Config("aggregation weight for an empty client".into()));
    }
    let effective: Vec<f64> = slice_counts
        .iter()
        .map(|&c| cap.map_or(c, |cap| c.min(cap)) as f64)
        .collect();
    let total: f64 = effective.iter().sum();
    Ok(effective.into_iter().map(|e| e / total).collect())
}

/// λ-weighted mean of structurally identical models, accumulated in f64 and
/// summed in client-index order.
pub fn fedavg(models: &[ModelParams<f32>], lambda: &[f64]) -> Result<ModelParams<f32>> {
    if models.is_empty() || models.len() != lambda.len() {
        return Err(Error::Aggregation(format!(
            "{} models for {} weights",
            models.len(),
            lambda.len()
        )));
    }
    let first = &models[0];
    for (k, m) in models.iter().enumerate().skip(1) {
        if m.len() != first.len() {
            return Err(Error::Aggregation(format!(
                "client {k} has {} tensors, client 0 has {}",
                m.len(),
                first.len()
            )));
        }
        for (a, b) in first.iter().zip(m.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Aggregation(format!(
                    "tensor {} diverges at client {k}: {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
    }
    let mut out = ModelParams::new();
    for (pi, p) in first.iter().enumerate() {
        let mut acc = vec![0f64; p.value.len()];
        for (k, m) in models.iter().enumerate() {
            let w = lambda[k];
            for (a, &v) in acc.iter_mut().zip(m.get(pi).value.data()) {
                *a += w * v as f64;
            }
        }
        let data: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        out.push(
            p.name.clone(),
            crate::tensor::Tensor { shape: p.value.shape().to_vec(), data },
        );
    }
    Ok(out)
}

/// One client's training summary for a round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub slice_count: usize,
    pub iterations: usize,
    pub mean_loss: LossBreakdown,
}

/// Per-round record: schedule state, per-client stats, aggregation weights,
/// and the post-aggregation server evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub lr: f64,
    pub lambda: Vec<f64>,
    pub clients: Vec<ClientRoundStats>,
    /// `server_eval[i]` holds client i's per-class validation reports.
    pub server_eval: Vec<Vec<DiceReport>>,
}

/// Run `local_epochs` of episodic SGD from the broadcast parameters.
/// Episode RNG is derived from (global_seed, client, round, iteration), so
/// the result is independent of scheduling.
pub fn local_train(
    fed: &FedConfig,
    pipe: &PipelineConfig,
    client: &ClientDataset,
    start: &ModelParams<f32>,
    round: usize,
) -> Result<(ModelParams<f32>, ClientRoundStats)> {
    let slices = client.training_slices();
    if slices.is_empty() {
        return Err(Error::Config(format!("client {} has no training slices", client.client_id)));
    }
    let per_epoch = match fed.iteration_cap {
        Some(cap) => slices.len().min(cap),
        None => slices.len(),
    };
    let lr = fed.lr_at(round) as f32;
    let mut params = start.clone();
    let mut sums = [0f64; 5];
    let mut iterations = 0usize;

    for epoch in 0..fed.local_epochs {
        for it in 0..per_epoch {
            let iteration = (epoch * per_epoch + it) as u64;
            let seed = rng::episode_seed(
                fed.global_seed,
                client.client_id as u64,
                round as u64,
                iteration,
            );
            let mut ep_rng = rng::seeded(seed);
            use rand::Rng;
            let (scan_idx, z) = slices[ep_rng.gen_range(0..slices.len())];
            let scan = &client.scans[scan_idx];
            let source = SliceRef {
                client_id: client.client_id as u32,
                scan_id: scan.scan_id,
                slice_index: z as u32,
            };
            let episode = make_episode(
                &scan.slice(z),
                source,
                &mut ep_rng,
                &pipe.superpixel,
                &pipe.augment,
            )?;

            let mut tape = Tape::<f32>::new();
            let staged = stage_params(&mut tape, &params);
            let loss = total_loss(
                &mut tape,
                &pipe.enc,
                &pipe.proto,
                &staged,
                &episode,
                fed.baseline_mode,
            )?;
            tape.backward(loss.total_id)?;
            harvest_grads(&tape, &staged, &mut params)?;
            params.sgd_step(lr)?;
            if !params.all_finite() {
                return Err(Error::Numeric(format!(
                    "client {} round {round} iteration {iteration}: non-finite parameters",
                    client.client_id
                )));
            }
            let b = loss.breakdown;
            for (s, v) in sums
                .iter_mut()
                .zip([b.ce, b.cyclic, b.spatial_dice, b.edge_dice, b.total])
            {
                *s += v;
            }
            iterations += 1;
        }
    }

    let n = iterations as f64;
    let mean_loss = LossBreakdown {
        ce: sums[0] / n,
        cyclic: sums[1] / n,
        spatial_dice: sums[2] / n,
        edge_dice: sums[3] / n,
        total: sums[4] / n,
    };
    Ok((
        params,
        ClientRoundStats {
            client_id: client.client_id,
            slice_count: client.slice_count,
            iterations,
            mean_loss,
        },
    ))
}

/// Highest organ label across a client roster; classes 1..=L are evaluated.
pub fn max_class(clients: &[ClientDataset]) -> u8 {
    clients
        .iter()
        .flat_map(|c| c.scans.iter())
        .map(|s| s.max_label())
        .max()
        .unwrap_or(0)
}

pub struct FederationOutcome {
    pub final_model: ModelParams<f32>,
    pub reports: Vec<RoundReport>,
}

/// The full round loop: broadcast, parallel local training, index-ordered
/// FedAvg, then server-side evaluation of the aggregated model on every
/// client's validation scans. A client failure aborts the run.
pub fn run_federation(
    fed: &FedConfig,
    pipe: &PipelineConfig,
    clients: &[ClientDataset],
    mut on_round: impl FnMut(&RoundReport),
) -> Result<FederationOutcome> {
    fed.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("federation needs at least one client".into()));
    }
    let n_classes = max_class(clients);
    let counts: Vec<usize> = clients.iter().map(|c| c.slice_count).collect();
    let lambda = aggregation_weights(&counts, fed.iteration_cap)?;

    let mut global = init_params(&pipe.enc, rng::init_seed(fed.global_seed));
    let mut reports = Vec::with_capacity(fed.rounds);
    for round in 0..fed.rounds {
        let results: Vec<Result<(ModelParams<f32>, ClientRoundStats)>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = clients
                    .iter()
                    .map(|client| {
                        let start = &global;
                        scope.spawn(move || local_train(fed, pipe, client, start, round))
                    })
                    .collect();
                // Join in client-index order.
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client worker panicked"))
                    .collect()
            });
        let mut models = Vec::with_capacity(clients.len());
        let mut stats = Vec::with_capacity(clients.len());
        for r in results {
            let (m, s) = r?;
            models.push(m);
            stats.push(s);
        }
        global = fedavg(&models, &lambda)?;

        let mut server_eval = Vec::with_capacity(clients.len());
        for client in clients {
            let mut per_class = Vec::new();
            for class_id in 1..=n_classes {
                per_class.push(one_shot_validate(
                    &global,
                    &pipe.enc,
                    &pipe.proto,
                    client,
                    class_id,
                )?);
            }
            server_eval.push(per_class);
        }

        let report = RoundReport {
            round,
            lr: fed.lr_at(round),
            lambda: lambda.clone(),
            clients: stats,
            server_eval,
        };
        on_round(&report);
        reports.push(report);
    }
    Ok(FederationOutcome { final_model: global, reports })
}

/// Sequential training over one dataset with the same seeds and schedule
/// as a federation round loop; the reference a 1-client federation must
/// match byte for byte.
pub fn centralized_train(
    fed: &FedConfig,
    pipe: &PipelineConfig,
    client: &ClientDataset,
) -> Result<ModelParams<f32>> {
    fed.validate()?;
    let mut params = init_params(&pipe.enc, rng::init_seed(fed.global_seed));
    for round in 0..fed.rounds {
        let (next, _) = local_train(fed, pipe, client, &params, round)?;
        params = next;
    }
    Ok(params)
}

// ---- metrics emission ---------------------------------------------------

/// JSON-lines for one round: one object per client, then one server object.
pub fn round_json_lines(report: &RoundReport) -> Vec<String> {
    let mut lines = Vec::with_capacity(report.clients.len() + 1);
    for c in &report.clients {
        let obj = serde_json::json!({
            "kind": "client",
            "round": report.round,
            "client": c.client_id,
            "lr": report.lr,
            "lambda": report.lambda[c.client_id],
            "slices": c.slice_count,
            "iterations": c.iterations,
            "loss": c.mean_loss,
        });
        lines.push(obj.to_string());
    }
    let obj = serde_json::json!({
        "kind": "server",
        "round": report.round,
        "lr": report.lr,
        "eval": report.server_eval,
    });
    lines.push(obj.to_string());
    lines
}

pub fn csv_header(n_classes: u8) -> String {
    let mut s = String::from("round,client,ce,cyclic,spatial_dice,edge_dice,total");
    for c in 1..=n_classes {
        s.push_str(&format!(",dice_class_{c}"));
    }
    s
}

/// CSV rows for one round, one row per client. Dice columns hold the mean
/// validation percent for that class or `skipped`.
pub fn csv_rows(report: &RoundReport, n_classes: u8) -> Vec<String> {
    report
        .clients
        .iter()
        .map(|c| {
            let l = &c.mean_loss;
            let mut row = format!(
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
                report.round, c.client_id, l.ce, l.cyclic, l.spatial_dice, l.edge_dice, l.total
            );
            let evals = &report.server_eval[c.client_id];
            for class_id in 1..=n_classes {
                match evals
                    .iter()
                    .find(|r| r.class_id == class_id)
                    .and_then(|r| r.mean_percent)
                {
                    Some(d) => row.push_str(&format!(",{d:.6}")),
                    None => row.push_str(",skipped"),
                }
            }
            row
        })
        .collect()
}
