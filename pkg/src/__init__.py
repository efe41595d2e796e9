# DroNet single-shot detector engine and design-space benchmark
