# Utils package for Bench Sentry
