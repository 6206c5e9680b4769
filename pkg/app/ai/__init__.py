# Remote target model client
