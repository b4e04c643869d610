//! Orchestrates the device workflow: load coefficients into MRAM, stage the
//! image in SRAM, drive the engine grid layer by layer, return results and
//! accounting. Also provides multi-model residency, cooperative
//! round-robin interleaving of several jobs on the one grid, and ensembles.
//!
//! The role split is strict: coefficients live in MRAM and are read by the
//! engine directly; activations live in SRAM and every intermediate feature
//! map passes through it (written after a layer, read back before the
//! next), so the access counters reflect real traffic. Intermediates that
//! do not fit SRAM fail the run; nothing spills to MRAM.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dsfp::{WideAccumulator, DSFP9};
use crate::engine::{run_conv_layer, EngineError, EngineGrid, FeatureMap, RingSchedule};
use crate::memory::{DeviceMemory, MemoryError, MemoryKind, RegionId};
use crate::power::{
    build_report, layer_cycles, CycleModel, PowerConfig, PowerError, PowerReport, Temperature,
};
use crate::quantizer::ModelDescriptor;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("model {0:?} is already resident")]
    DuplicateModel(String),
    #[error("model {0:?} is not resident")]
    NotResident(String),
    #[error("weight blob is {got} bytes, descriptor declares {expected}")]
    BlobLength { expected: u64, got: usize },
    #[error("descriptor inconsistent: {0}")]
    DescriptorInconsistent(String),
    #[error("input has {got} channels, model expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("ensemble needs at least one model")]
    EnsembleEmpty,
    #[error("ensemble outputs disagree in shape: {0}")]
    EnsembleShape(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Power(#[from] PowerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

/// One inference request and, once executed, its result and accounting.
#[derive(Debug, Clone)]
pub struct InferenceJob {
    pub model_id: String,
    pub input: FeatureMap,
    pub status: JobStatus,
    pub output: Option<FeatureMap>,
    /// Failure reason when status is Failed.
    pub failure: Option<String>,
    pub total_macs: u64,
    pub total_cycles: u64,
}

impl InferenceJob {
    pub fn new(model_id: impl Into<String>, input: FeatureMap) -> Self {
        Self {
            model_id: model_id.into(),
            input,
            status: JobStatus::Pending,
            output: None,
            failure: None,
            total_macs: 0,
            total_cycles: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct ResidentModel {
    descriptor: ModelDescriptor,
    region: RegionId,
}

/// Shape and bias of an activation held in SRAM:
/// (channels, height, width, exp_bias).
type ActMeta = (usize, usize, usize, i32);

/// The whole device: memory tiers, engine grid, resident models, and the
/// calibrated power model.
#[derive(Debug)]
pub struct DeviceState {
    pub memory: DeviceMemory,
    pub grid: EngineGrid,
    resident: BTreeMap<String, ResidentModel>,
    pub power_cfg: PowerConfig,
    pub cycle_model: CycleModel,
    pub schedule: RingSchedule,
}

impl DeviceState {
    pub fn new(
        memory: DeviceMemory,
        grid: EngineGrid,
        power_cfg: PowerConfig,
        cycle_model: CycleModel,
    ) -> Self {
        Self {
            memory,
            grid,
            resident: BTreeMap::new(),
            power_cfg,
            cycle_model,
            schedule: RingSchedule::default(),
        }
    }

    /// Default-capacity device with the measured power preset and a 14x14
    /// grid of 14x14-pixel tiles.
    pub fn with_defaults() -> Self {
        Self::new(
            DeviceMemory::default(),
            EngineGrid::new(14, 14).expect("default grid is valid"),
            PowerConfig::paper_22nm(),
            CycleModel::default(),
        )
    }

    pub fn resident_models(&self) -> impl Iterator<Item = &ModelDescriptor> {
        self.resident.values().map(|r| &r.descriptor)
    }

    pub fn model(&self, id: &str) -> Option<&ModelDescriptor> {
        self.resident.get(id).map(|r| &r.descriptor)
    }

    pub fn model_region(&self, id: &str) -> Option<RegionId> {
        self.resident.get(id).map(|r| r.region)
    }

    /// Loads a model's coefficients into a fresh MRAM region and registers
    /// it. On any failure the device is left exactly as it was.
    pub fn load_model(
        &mut self,
        descriptor: ModelDescriptor,
        blob: &[u8],
    ) -> Result<(), SchedulerError> {
        if self.resident.contains_key(&descriptor.id) {
            return Err(SchedulerError::DuplicateModel(descriptor.id));
        }
        if blob.len() as u64 != descriptor.coeff_bytes {
            return Err(SchedulerError::BlobLength {
                expected: descriptor.coeff_bytes,
                got: blob.len(),
            });
        }
        let required: u64 = descriptor.layers.iter().map(|l| l.weight_bytes()).sum();
        if required != descriptor.coeff_bytes {
            return Err(SchedulerError::DescriptorInconsistent(format!(
                "layer table needs {required} bytes, coeff_bytes says {}",
                descriptor.coeff_bytes
            )));
        }
        let region =
            self.memory
                .allocate(MemoryKind::Mram, descriptor.coeff_bytes, &descriptor.id)?;
        if let Err(e) = self.memory.write(region, 0, blob) {
            let _ = self.memory.free(region);
            return Err(e.into());
        }
        self.resident
            .insert(descriptor.id.clone(), ResidentModel { descriptor, region });
        Ok(())
    }

    /// Evicts a model and frees its MRAM region.
    pub fn unload_model(&mut self, id: &str) -> Result<ModelDescriptor, SchedulerError> {
        let rm = self
            .resident
            .remove(id)
            .ok_or_else(|| SchedulerError::NotResident(id.to_string()))?;
        self.memory.free(rm.region)?;
        Ok(rm.descriptor)
    }

    /// Re-registers models found in a restored MRAM region table, pairing
    /// each manifest descriptor with the region whose owner matches its id.
    pub fn adopt_region(&mut self, descriptor: ModelDescriptor) -> Result<(), SchedulerError> {
        if self.resident.contains_key(&descriptor.id) {
            return Err(SchedulerError::DuplicateModel(descriptor.id));
        }
        let region = self
            .memory
            .regions_of(MemoryKind::Mram)
            .find(|r| r.owner == descriptor.id)
            .map(|r| r.id)
            .ok_or_else(|| SchedulerError::NotResident(descriptor.id.clone()))?;
        self.resident
            .insert(descriptor.id.clone(), ResidentModel { descriptor, region });
        Ok(())
    }

    /// Power loss and restore: SRAM and the engine grid are wiped, MRAM and
    /// the resident-model registry survive.
    pub fn power_cycle(&mut self) {
        self.memory.power_cycle();
        let (m, p) = (self.grid.m(), self.grid.p());
        self.grid = EngineGrid::new(m, p).expect("grid dims were already validated");
    }

    /// Writes an activation tensor into a fresh SRAM region.
    pub fn stage_input(&mut self, fmap: &FeatureMap) -> Result<RegionId, SchedulerError> {
        let bytes = fmap.to_bytes();
        let region = self
            .memory
            .allocate(MemoryKind::Sram, bytes.len() as u64, "activation")?;
        if let Err(e) = self.memory.write(region, 0, &bytes) {
            let _ = self.memory.free(region);
            return Err(e.into());
        }
        Ok(region)
    }

    fn read_activation(
        &mut self,
        region: RegionId,
        meta: ActMeta,
    ) -> Result<FeatureMap, SchedulerError> {
        let (c, h, w, bias) = meta;
        let bytes = self.memory.read(region, 0, (c * h * w * 2) as u64)?;
        Ok(FeatureMap::from_bytes(c, h, w, bias, &bytes)?)
    }

    /// Executes one layer of a model over the activation held in `region`,
    /// returning the new SRAM region and its shape. Frees the input region
    /// on success.
    fn step_layer(
        &mut self,
        model_id: &str,
        layer_index: usize,
        region: RegionId,
        meta: ActMeta,
    ) -> Result<(RegionId, ActMeta, u64, u64), SchedulerError> {
        let rm = self
            .resident
            .get(model_id)
            .ok_or_else(|| SchedulerError::NotResident(model_id.to_string()))?;
        let layer = rm.descriptor.layers[layer_index].clone();
        let model_region = rm.region;

        let fmap = self.read_activation(region, meta)?;
        let (h_in, w_in) = (fmap.height, fmap.width);
        let out = run_conv_layer(
            &fmap,
            &layer,
            &mut self.grid,
            &mut self.memory,
            model_region,
            &self.schedule,
        )?;
        let macs = (layer.out_ch * layer.in_ch * 9 * h_in * w_in) as u64;
        let cycles = layer_cycles(
            &layer,
            h_in,
            w_in,
            self.grid.m(),
            self.grid.p(),
            &self.cycle_model,
        );

        let new_region = self.stage_input(&out)?;
        self.memory.free(region)?;
        Ok((
            new_region,
            (out.channels, out.height, out.width, out.exp_bias),
            macs,
            cycles,
        ))
    }

    /// Runs one model to completion on one input.
    pub fn run_inference(
        &mut self,
        model_id: &str,
        input: FeatureMap,
    ) -> Result<InferenceJob, SchedulerError> {
        let descriptor = self
            .resident
            .get(model_id)
            .ok_or_else(|| SchedulerError::NotResident(model_id.to_string()))?
            .descriptor
            .clone();
        let first = descriptor
            .layers
            .first()
            .ok_or_else(|| SchedulerError::DescriptorInconsistent("no layers".into()))?;
        if input.channels != first.in_ch {
            return Err(SchedulerError::ShapeMismatch {
                expected: first.in_ch,
                got: input.channels,
            });
        }

        let mut job = InferenceJob::new(model_id, input.clone());
        job.status = JobStatus::Running;

        let mut region = self.stage_input(&input)?;
        let mut meta = (input.channels, input.height, input.width, input.exp_bias);
        for li in 0..descriptor.layers.len() {
            match self.step_layer(model_id, li, region, meta) {
                Ok((r, m, macs, cycles)) => {
                    region = r;
                    meta = m;
                    job.total_macs += macs;
                    job.total_cycles += cycles;
                }
                Err(e) => {
                    let _ = self.memory.free(region);
                    return Err(e);
                }
            }
        }
        let out = self.read_activation(region, meta);
        self.memory.free(region)?;
        job.output = Some(out?);
        job.status = JobStatus::Done;
        Ok(job)
    }

    /// Worst-case SRAM bytes the job holds at once: while a layer runs, its
    /// input region and its output region coexist.
    fn job_peak_bytes(descriptor: &ModelDescriptor, input: &FeatureMap) -> u64 {
        let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
        let mut peak = (c * h * w * 2) as u64;
        for layer in &descriptor.layers {
            let in_bytes = (c * h * w * 2) as u64;
            c = layer.out_ch;
            if layer.pool {
                h /= 2;
                w /= 2;
            }
            let out_bytes = (c * h * w * 2) as u64;
            peak = peak.max(in_bytes + out_bytes);
        }
        peak
    }

    /// Runs several jobs cooperatively, one layer per turn in submission
    /// order. A job is admitted (its input staged) only while the admitted
    /// set's combined worst-case SRAM footprint fits capacity; jobs over
    /// that line wait for earlier ones to finish instead of failing. A job
    /// whose activations cannot fit even on an idle device fails with a
    /// capacity explanation, as does any survivor of a round with no
    /// progress (fragmentation). Each output is byte-identical to running
    /// that job alone.
    pub fn run_concurrent(&mut self, jobs: Vec<InferenceJob>) -> Vec<InferenceJob> {
        struct Active {
            job: InferenceJob,
            layer_index: usize,
            region: Option<RegionId>,
            meta: ActMeta,
            n_layers: usize,
            peak_bytes: u64,
            admitted: bool,
        }

        let sram_capacity = self.memory.capacity(MemoryKind::Sram);
        let mut slots: Vec<Active> = jobs
            .into_iter()
            .map(|mut job| {
                let meta = (
                    job.input.channels,
                    job.input.height,
                    job.input.width,
                    job.input.exp_bias,
                );
                let mut peak_bytes = 0;
                let n_layers = match self.resident.get(&job.model_id) {
                    Some(rm) => {
                        let first_in = rm.descriptor.layers.first().map(|l| l.in_ch);
                        if first_in != Some(job.input.channels) {
                            job.status = JobStatus::Failed;
                            job.failure = Some(format!(
                                "input has {} channels, model expects {:?}",
                                job.input.channels, first_in
                            ));
                        }
                        peak_bytes = Self::job_peak_bytes(&rm.descriptor, &job.input);
                        if peak_bytes > sram_capacity {
                            job.status = JobStatus::Failed;
                            job.failure = Some(format!(
                                "SRAM capacity cannot hold this job's activations even alone \
                                 ({peak_bytes} bytes needed, {sram_capacity} total)"
                            ));
                        }
                        rm.descriptor.layers.len()
                    }
                    None => {
                        job.status = JobStatus::Failed;
                        job.failure = Some(format!("model {:?} is not resident", job.model_id));
                        0
                    }
                };
                Active {
                    job,
                    layer_index: 0,
                    region: None,
                    meta,
                    n_layers,
                    peak_bytes,
                    admitted: false,
                }
            })
            .collect();

        loop {
            let mut progressed = false;
            let mut all_settled = true;

            let mut reserved: u64 = slots
                .iter()
                .filter(|s| {
                    s.admitted && matches!(s.job.status, JobStatus::Pending | JobStatus::Running)
                })
                .map(|s| s.peak_bytes)
                .sum();

            for slot in slots.iter_mut() {
                match slot.job.status {
                    JobStatus::Done | JobStatus::Failed => continue,
                    _ => all_settled = false,
                }

                if !slot.admitted {
                    if reserved + slot.peak_bytes > sram_capacity {
                        continue; // wait for running jobs to release their share
                    }
                    let input = slot.job.input.clone();
                    match self.stage_input(&input) {
                        Ok(r) => {
                            slot.region = Some(r);
                            slot.admitted = true;
                            slot.job.status = JobStatus::Running;
                            reserved += slot.peak_bytes;
                            progressed = true;
                        }
                        Err(SchedulerError::Memory(
                            MemoryError::CapacityExceeded { .. } | MemoryError::Fragmented { .. },
                        )) => continue,
                        Err(e) => {
                            slot.job.status = JobStatus::Failed;
                            slot.job.failure = Some(e.to_string());
                            continue;
                        }
                    }
                }

                let region = slot.region.expect("admitted jobs hold a region");
                if slot.layer_index == slot.n_layers {
                    let read = self.read_activation(region, slot.meta);
                    let _ = self.memory.free(region);
                    slot.region = None;
                    match read {
                        Ok(out) => {
                            slot.job.output = Some(out);
                            slot.job.status = JobStatus::Done;
                            progressed = true;
                        }
                        Err(e) => {
                            slot.job.status = JobStatus::Failed;
                            slot.job.failure = Some(e.to_string());
                        }
                    }
                    reserved -= slot.peak_bytes;
                    continue;
                }

                match self.step_layer(
                    &slot.job.model_id.clone(),
                    slot.layer_index,
                    region,
                    slot.meta,
                ) {
                    Ok((r, m, macs, cycles)) => {
                        slot.region = Some(r);
                        slot.meta = m;
                        slot.layer_index += 1;
                        slot.job.total_macs += macs;
                        slot.job.total_cycles += cycles;
                        progressed = true;
                    }
                    Err(SchedulerError::Memory(
                        MemoryError::CapacityExceeded { .. } | MemoryError::Fragmented { .. },
                    )) => {
                        // input region is still held; retry next round
                        continue;
                    }
                    Err(e) => {
                        let _ = self.memory.free(region);
                        slot.region = None;
                        slot.job.status = JobStatus::Failed;
                        slot.job.failure = Some(e.to_string());
                        reserved -= slot.peak_bytes;
                    }
                }
            }

            if all_settled {
                break;
            }
            if !progressed {
                for slot in slots.iter_mut() {
                    if matches!(slot.job.status, JobStatus::Pending | JobStatus::Running) {
                        if let Some(r) = slot.region.take() {
                            let _ = self.memory.free(r);
                        }
                        slot.job.status = JobStatus::Failed;
                        slot.job.failure =
                            Some("no job could make progress against SRAM capacity".to_string());
                    }
                }
                break;
            }
        }

        slots.into_iter().map(|s| s.job).collect()
    }

    /// Runs every listed model on the same input and combines the outputs:
    /// elementwise exact sum of the decoded values, divided by the model
    /// count in double precision, re-encoded at the first model's output
    /// bias. Deterministic for a fixed model list.
    pub fn run_ensemble(
        &mut self,
        model_ids: &[&str],
        input: &FeatureMap,
    ) -> Result<InferenceJob, SchedulerError> {
        if model_ids.is_empty() {
            return Err(SchedulerError::EnsembleEmpty);
        }
        let mut outputs = Vec::with_capacity(model_ids.len());
        let mut total_macs = 0;
        let mut total_cycles = 0;
        for id in model_ids {
            let job = self.run_inference(id, input.clone())?;
            total_macs += job.total_macs;
            total_cycles += job.total_cycles;
            outputs.push(job.output.expect("run_inference returns Done"));
        }
        let first = &outputs[0];
        for (i, o) in outputs.iter().enumerate().skip(1) {
            if (o.channels, o.height, o.width) != (first.channels, first.height, first.width) {
                return Err(SchedulerError::EnsembleShape(format!(
                    "model {:?} emits {}x{}x{}, model {:?} emits {}x{}x{}",
                    model_ids[0],
                    first.channels,
                    first.height,
                    first.width,
                    model_ids[i],
                    o.channels,
                    o.height,
                    o.width
                )));
            }
        }

        let n = outputs.len() as f64;
        let out_bias = first.exp_bias;
        let mut codes = Vec::with_capacity(first.codes().len());
        for idx in 0..first.codes().len() {
            let mut acc = WideAccumulator::zero();
            for o in &outputs {
                let (m, e) = DSFP9.decode_fixed(o.codes()[idx], o.exp_bias);
                acc.add_fixed(m as i128, e);
            }
            let mean = acc.to_f64() / n;
            codes.push(DSFP9.encode(mean, out_bias).expect("mean of finite values"));
        }
        let combined = FeatureMap::new(first.channels, first.height, first.width, out_bias, codes)?;

        let mut job = InferenceJob::new(model_ids.join("+"), input.clone());
        job.status = JobStatus::Done;
        job.output = Some(combined);
        job.total_macs = total_macs;
        job.total_cycles = total_cycles;
        Ok(job)
    }

    /// Power/throughput report for a completed workload on this device.
    pub fn power_report(
        &self,
        total_macs: u64,
        cycles: u64,
        kind: MemoryKind,
        temp: Temperature,
    ) -> Result<PowerReport, PowerError> {
        build_report(
            *self.memory.counters(MemoryKind::Mram),
            *self.memory.counters(MemoryKind::Sram),
            total_macs,
            cycles,
            &self.power_cfg,
            kind,
            temp,
        )
    }
}
