use salientsleep::model::{Model, Variant};
use salientsleep::Result;
use serde_json::json;

use crate::Scale;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, value_enum, default_value = "full")]
    scale: Scale,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

pub fn run(a: Args) -> Result<()> {
    let model = Model::new(a.scale.config(a.variant))?;
    let count = model.count_parameters();
    if a.json {
        let modules: serde_json::Map<String, serde_json::Value> =
            count.modules.iter().map(|(m, n)| (m.clone(), json!(n))).collect();
        let doc = json!({
            "variant": a.variant,
            "scale": a.scale,
            "total": count.total,
            "modules": modules,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!("{count}");
    }
    Ok(())
}
