#![no_main]
use libfuzzer_sys::fuzz_target;
use pcrlb_design::policy::MarkovInputPolicy;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(policy) = MarkovInputPolicy::from_text(text) {
        let again = MarkovInputPolicy::from_text(&policy.to_text()).expect("serialized policy parses");
        assert_eq!(again, policy);
    }
});
