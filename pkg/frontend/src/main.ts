/** Entry point: mount the app on #app, API base from ?api= or same origin. */

import { App } from "./app.js";

const root = document.getElementById("app");
if (root === null) throw new Error("missing #app mount point");

const params = new URLSearchParams(window.location.search);
const app = new App(root, {
  apiBase: params.get("api") ?? "",
  annotator: params.get("annotator") ?? undefined,
});
void app.start();
