import { initApp } from "./app.js";

// module scripts run after parsing, so the page elements already exist
initApp(document);
