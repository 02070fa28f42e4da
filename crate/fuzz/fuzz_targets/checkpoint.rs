#![no_main]

use libfuzzer_sys::fuzz_target;
use spanedit::artifact::TrainedModel;
use spanedit_autodiff::Precision;

// Accepted checkpoints re-encode at full precision to an equal model.
fuzz_target!(|data: &[u8]| {
    if let Ok(trained) = TrainedModel::from_bytes(data) {
        let bytes = trained.to_bytes(Precision::F64).unwrap();
        assert_eq!(TrainedModel::from_bytes(&bytes).unwrap(), trained);
    }
});
