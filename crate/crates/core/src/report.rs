use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DelaySource {
    Analytic,
    Simulated,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueueDelay {
    pub queue: usize,
    pub lambda: f64,
    /// Mean packet delay, seconds.
    pub mean_s: f64,
    /// 95% confidence half-width (simulation only).
    pub ci_half_width_s: Option<f64>,
    pub packets: u64,
}

/// Per-queue and network-average packet delays.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DelayReport {
    pub source: DelaySource,
    pub queues: Vec<QueueDelay>,
    /// `Σ λ d / Σ λ`.
    pub network_mean_s: f64,
    pub network_ci_s: Option<f64>,
    pub packets_served: u64,
    pub warmup_discarded: u64,
}

impl DelayReport {
    pub fn analytic(lambda: &[f64], delays: &[f64]) -> Self {
        let queues = lambda
            .iter()
            .zip(delays)
            .enumerate()
            .map(|(queue, (&lambda, &mean_s))| QueueDelay {
                queue,
                lambda,
                mean_s,
                ci_half_width_s: None,
                packets: 0,
            })
            .collect();
        DelayReport {
            source: DelaySource::Analytic,
            queues,
            network_mean_s: network_mean(lambda, delays),
            network_ci_s: None,
            packets_served: 0,
            warmup_discarded: 0,
        }
    }

    /// Report for a network without traffic.
    pub fn empty(n_queues: usize, source: DelaySource) -> Self {
        DelayReport {
            source,
            queues: (0..n_queues)
                .map(|queue| QueueDelay {
                    queue,
                    lambda: 0.0,
                    mean_s: 0.0,
                    ci_half_width_s: None,
                    packets: 0,
                })
                .collect(),
            network_mean_s: 0.0,
            network_ci_s: None,
            packets_served: 0,
            warmup_discarded: 0,
        }
    }
}

/// Arrival-weighted mean of per-queue delays; zero without traffic.
pub fn network_mean(lambda: &[f64], delays: &[f64]) -> f64 {
    let total: f64 = lambda.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    lambda.iter().zip(delays).filter(|(l, _)| **l > 0.0).map(|(l, d)| l * d).sum::<f64>() / total
}
