//! Print the built-in experiment config as TOML.
fn main() {
    print!("{}", pd_device::ExperimentConfig::default().to_toml());
}
