//! Experiment tooling: datasets, scheme preparation, fault campaigns, bound
//! sweeps, activation histograms and overhead measurement.

pub mod analysis;
pub mod campaign;
pub mod datasets;
pub mod pipeline;
pub mod stats;

pub use analysis::{
    measure_overhead, neuron_max_histogram, sweep_csv, sweep_global_bound, Histogram, OverheadConfig,
    OverheadReport, OverheadRow, SweepConfig, SweepRow,
};
pub use campaign::{
    bits_in_scope, parse_samples_csv, run_campaign, trial_seeds, CampaignReport, Cell, ExperimentSpec,
    ReportMetadata, Sample, Scheme, SchemeInfo,
};
pub use datasets::{
    export_image_dir, gaussian_blobs, load_image_dir, synthetic_digits, DataConfig, DatasetSource,
};
pub use pipeline::{
    prepare, protect, protect_gbrelu, HistogramConfig, ModifyConfig, PipelineConfig, Prepared, Workload,
    CONFIG_VERSION,
};
pub use stats::Summary;
