# Core speculative decoding services
