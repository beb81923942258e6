use std::time::Instant;

use serde::Serialize;

/// Operation classes reported in the execution-time breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    TrainSeq,
    PredictSeq,
    TrainInit,
    PredictInit,
    #[serde(rename = "train_DQN")]
    TrainDqn,
    #[serde(rename = "predict_1")]
    Predict1,
    #[serde(rename = "predict_32")]
    Predict32,
}

impl OpClass {
    pub const ALL: [OpClass; 7] = [
        OpClass::TrainSeq,
        OpClass::PredictSeq,
        OpClass::TrainInit,
        OpClass::PredictInit,
        OpClass::TrainDqn,
        OpClass::Predict1,
        OpClass::Predict32,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::TrainSeq => "train_seq",
            OpClass::PredictSeq => "predict_seq",
            OpClass::TrainInit => "train_init",
            OpClass::PredictInit => "predict_init",
            OpClass::TrainDqn => "train_DQN",
            OpClass::Predict1 => "predict_1",
            OpClass::Predict32 => "predict_32",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Aggregate wall time and call counts per [`OpClass`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpTimings {
    total_ns: [u64; 7],
    calls: [u64; 7],
}

impl OpTimings {
    pub fn time<T>(&mut self, class: OpClass, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(class, start.elapsed().as_nanos() as u64);
        out
    }

    pub fn record(&mut self, class: OpClass, ns: u64) {
        self.total_ns[class.index()] += ns;
        self.calls[class.index()] += 1;
    }

    pub fn total_ns(&self, class: OpClass) -> u64 {
        self.total_ns[class.index()]
    }

    pub fn calls(&self, class: OpClass) -> u64 {
        self.calls[class.index()]
    }

    pub fn grand_total_ns(&self) -> u64 {
        self.total_ns.iter().sum()
    }

    pub fn merge(&mut self, other: &OpTimings) {
        for i in 0..7 {
            self.total_ns[i] += other.total_ns[i];
            self.calls[i] += other.calls[i];
        }
    }
}
