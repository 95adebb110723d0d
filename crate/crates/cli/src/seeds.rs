use sha2::{Digest, Sha256};

/// Derives a component seed from the root seed and a stable label.
pub fn derive(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_label_sensitive() {
        assert_eq!(
            derive(7, "2d-cnn/fold0/init"),
            derive(7, "2d-cnn/fold0/init")
        );
        assert_ne!(
            derive(7, "2d-cnn/fold0/init"),
            derive(7, "2d-cnn/fold1/init")
        );
        assert_ne!(derive(7, "plan"), derive(8, "plan"));
    }
}
