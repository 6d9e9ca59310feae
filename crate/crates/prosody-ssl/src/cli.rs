/// Placeholder; replaced by the full CLI.
pub fn dispatch(_args: impl Iterator<Item = String>) -> i32 {
    2
}
