# STAND speculative decoding engine
