fn main() -> std::io::Result<()> {
    nsattn_testkit::fixtures::regenerate_all()?;
    println!(
        "fixtures written to {}",
        nsattn_testkit::fixtures::fixture_dir().display()
    );
    Ok(())
}
