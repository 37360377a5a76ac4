mod attention_benchmark {
    include!("../examples/attention_benchmark.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod checkpoints {
    include!("../examples/checkpoints.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod command_line {
    include!("../examples/command_line.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod efficient_attention {
    include!("../examples/efficient_attention.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod gradient_check {
    include!("../examples/gradient_check.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod inspect_attention {
    include!("../examples/inspect_attention.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod metrics {
    include!("../examples/metrics.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod model_summary {
    include!("../examples/model_summary.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod msla_block {
    include!("../examples/msla_block.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod synthetic_data {
    include!("../examples/synthetic_data.rs");

    #[test]
    fn runs() {
        main();
    }
}

mod train_and_evaluate {
    include!("../examples/train_and_evaluate.rs");

    #[test]
    fn runs() {
        main();
    }
}
