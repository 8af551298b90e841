//! Build a bundle from CSV scores and a prompts file.

use std::fs;

use sparc::io::import_csv;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = |name: &str| dir.path().join(name);
    let write = |name: &str, text: &str| fs::write(path(name), text);
    write(
        "prompts.csv",
        "id,kind,classes,text\n0,singleton,cat,a photo of a cat.\n1,singleton,dog,a photo of a dog.\n\
         2,auxiliary,cat,cat\n3,auxiliary,dog,dog\n4,compound,cat|dog,cat and dog\n",
    )?;
    write(
        "scores.csv",
        "image_id,0,1,2,3,4\na,0.31,0.22,0.30,0.20,0.33\nb,0.18,0.29,0.19,0.30,0.27\nc,0.25,0.24,0.26,0.21,0.28\n",
    )?;
    write("labels.csv", "image_id,cat,dog\na,1,0\nb,0,1\nc,1,1\n")?;
    let bundle = import_csv(
        &path("scores.csv"),
        &path("prompts.csv"),
        Some(&path("labels.csv")),
    )?;
    println!(
        "classes {:?}, {} images, compound prompts {:?}",
        bundle.vocabulary.names(),
        bundle.num_images(),
        bundle.compound.prompt_ids
    );
    Ok(())
}
